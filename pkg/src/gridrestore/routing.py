"""Crew routing: travel times, repair schedules and the line-availability map."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .netmodel import NetworkTopology, Window

BLOCKED_MIN = 1000.0
DEFAULT_SPEED_KMH = 30.0

Point = tuple[float, float]


@dataclass
class Damage:
    id: str
    line: tuple[str, str]
    repair_min: float
    emerge_min: float = 0.0
    repair_by_crew: dict[str, float] = field(default_factory=dict)
    x: float | None = None
    y: float | None = None

    def __post_init__(self):
        if self.repair_min <= 0:
            raise ValueError(f"damage {self.id}: repair time must be positive")
        if self.emerge_min < 0:
            raise ValueError(f"damage {self.id}: emergence time must be nonnegative")

    def duration(self, crew_id: str | None = None) -> float:
        return self.repair_by_crew.get(crew_id, self.repair_min)


@dataclass
class Crew:
    """Crew state at the current clock.

    ``position`` is a location id, or an (x, y) point while travelling; a
    travelling crew also carries ``heading`` and ``arrival``.
    """

    id: str
    depot: str
    position: str | Point
    busy_until: float = 0.0
    ongoing_damage: str | None = None
    heading: str | None = None
    arrival: float | None = None

    @property
    def in_transit(self) -> bool:
        return self.heading is not None


@dataclass(frozen=True)
class TravelOverride:
    minutes: float
    start: float
    end: float | None = None
    to: str | None = None
    frm: str | None = None

    def active(self, t: float) -> bool:
        return self.start <= t and (self.end is None or t < self.end)

    def matches(self, frm, to) -> bool:
        if self.to is not None and self.to != to:
            return False
        if self.frm is not None and self.frm != frm:
            return False
        return True


class TravelTimeProvider:
    """Travel minutes between locations, evaluated at the departure instant.

    Explicit matrix entries win over Euclidean distance at ``speed_kmh``;
    active overrides win over both.
    """

    def __init__(self, coords: Mapping[str, Point] | None = None,
                 speed_kmh: float = DEFAULT_SPEED_KMH,
                 matrix: Mapping[tuple[str, str], float] | None = None,
                 overrides: Sequence[TravelOverride] = ()):
        self.coords = dict(coords or {})
        self.speed_kmh = speed_kmh
        self.matrix = dict(matrix or {})
        self.overrides = list(overrides)

    def with_overrides(self, overrides: Sequence[TravelOverride]) -> "TravelTimeProvider":
        return TravelTimeProvider(self.coords, self.speed_kmh, self.matrix, overrides)

    def has_point_travel(self) -> bool:
        return bool(self.coords)

    def override(self, frm, to, t: float) -> TravelOverride | None:
        hit = None
        for ov in self.overrides:
            if ov.active(t) and ov.matches(frm, to):
                hit = ov
        return hit

    def travel(self, frm: str | Point, to: str, t: float = 0.0, crew: str | None = None) -> float:
        if isinstance(frm, str) and frm == to:
            return 0.0
        ov = self.override(frm if isinstance(frm, str) else None, to, t)
        if ov is not None:
            return ov.minutes
        if isinstance(frm, str) and (frm, to) in self.matrix:
            val = self.matrix[(frm, to)]
        else:
            val = self.base_minutes(self.point(frm), self.point(to))
        if val < 0:
            raise ValueError(f"negative travel time {frm} -> {to}")
        return float(val)

    def base_minutes(self, a: Point, b: Point) -> float:
        return math.dist(a, b) / self.speed_kmh * 60.0

    def point(self, loc: str | Point) -> Point:
        if not isinstance(loc, str):
            return (float(loc[0]), float(loc[1]))
        try:
            return self.coords[loc]
        except KeyError:
            raise KeyError(f"no coordinates or travel entry for location {loc}") from None


def interpolate(a: Point, b: Point, depart: float, arrive: float, t: float) -> Point:
    if arrive <= depart:
        return b
    f = min(max((t - depart) / (arrive - depart), 0.0), 1.0)
    return (a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1]))


@dataclass(frozen=True)
class ScheduledRepair:
    damage: str
    start: float
    finish: float


@dataclass
class RouteSchedule:
    crew: str
    repairs: list[ScheduledRepair] = field(default_factory=list)
    ongoing: ScheduledRepair | None = None

    def completions(self) -> dict[str, float]:
        out = {r.damage: r.finish for r in self.repairs}
        if self.ongoing is not None:
            out[self.ongoing.damage] = self.ongoing.finish
        return out


@dataclass
class ConnectivityMap:
    delta: np.ndarray          # lines x steps, {0, 1}
    switch_bits: np.ndarray    # switched lines x steps, {0, 1}

    def key(self) -> bytes:
        return np.packbits(self.delta.astype(bool)).tobytes() + self.delta.shape[1].to_bytes(2, "little")


def schedule_route(crew: Crew, sequence: Sequence[str], travel: TravelTimeProvider,
                   t0: float, damages: Mapping[str, Damage]) -> RouteSchedule:
    """Start/finish times along ``sequence``; each leg departs when the previous repair ends."""
    sched = RouteSchedule(crew.id)
    if crew.ongoing_damage is not None:
        d = damages.get(crew.ongoing_damage)
        start = crew.busy_until - (d.duration(crew.id) if d is not None else 0.0)
        sched.ongoing = ScheduledRepair(crew.ongoing_damage, start, crew.busy_until)
        pos: str | Point = crew.ongoing_damage
        t = max(t0, crew.busy_until)
    elif crew.in_transit and not travel.has_point_travel():
        pos, t = crew.heading, max(t0, crew.arrival)
    else:
        pos, t = crew.position, t0

    for k, did in enumerate(sequence):
        if did not in damages:
            raise KeyError(f"unknown damage {did}")
        if (k == 0 and crew.in_transit and crew.ongoing_damage is None
                and did == crew.heading and travel.has_point_travel()):
            arrive = max(t0, crew.arrival)
        else:
            tt = travel.travel(pos, did, t, crew.id)
            if tt < 0:
                raise ValueError(f"negative travel time to {did}")
            arrive = t + tt
        finish = arrive + damages[did].duration(crew.id)
        sched.repairs.append(ScheduledRepair(did, arrive, finish))
        pos, t = did, finish
    return sched


def truncate_to_window(schedule: RouteSchedule, window_end: float) -> RouteSchedule:
    kept = [r for r in schedule.repairs if r.start < window_end]
    return RouteSchedule(schedule.crew, kept, schedule.ongoing)


def connectivity(topology: NetworkTopology, damages: Sequence[Damage],
                 schedules: Sequence[RouteSchedule], switch_bits: np.ndarray,
                 window: Window, dt: float) -> ConnectivityMap:
    """Line availability per step.

    ``damages`` are the unrepaired damages known to the planner; a damaged
    line comes back once its repair completes by the step stamp and its
    switch (if any) is closed.
    """
    sw = topology.switched
    bits = np.asarray(switch_bits, dtype=np.uint8).reshape(len(sw), window.length)
    delta = np.ones((topology.n_line, window.length), dtype=np.uint8)
    for row, l in enumerate(sw):
        delta[l] = bits[row]
    done = {}
    for s in schedules:
        done.update(s.completions())
    stamps = window.stamps(dt)
    for d in damages:
        l = topology.line_between(*d.line)
        finish = done.get(d.id, math.inf)
        repaired = (finish <= stamps + 1e-9).astype(np.uint8)
        delta[l] = repaired * delta[l]
    return ConnectivityMap(delta, bits)
