"""Receding-horizon restoration loop and the pre-designed baseline.

The planner only sees what has been reported by the current planning step;
the world (crew movement, repairs, line availability) evolves with the
actual event times in between.
"""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dmpc import CoordinatorConfig
from .ga import (Chromosome, Evaluator, GAConfig, PlanningProblem, coordinate_warm, decode,
                 encode, heuristic_seed, run_ga)
from .netmodel import (DispatchVars, GridConfig, NetworkTopology, Window, build_system_qp,
                       extract_dispatch, load_network, network_from_dict, validate_network)
from .partition import Partition, from_assignment, partition_network, subsystems
from .qpsolve import solve_qp
from .routing import (BLOCKED_MIN, DEFAULT_SPEED_KMH, Crew, Damage, TravelOverride,
                      TravelTimeProvider, interpolate, schedule_route)

logger = logging.getLogger(__name__)

NEW_DAMAGE = "new_damage"
TRAVEL_CHANGE = "travel_time_change"
REPAIR_CHANGE = "repair_duration_change"
EVENT_KINDS = (NEW_DAMAGE, TRAVEL_CHANGE, REPAIR_CHANGE)

REALTIME = "realtime"
PREDESIGNED = "predesigned"


@dataclass(frozen=True)
class Event:
    kind: str
    time: float
    payload: dict

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")
        if self.time < 0:
            raise ValueError("event time must be nonnegative")


@dataclass
class CrewSpec:
    id: str
    depot: str
    x: float | None = None
    y: float | None = None


@dataclass
class Scenario:
    topology: NetworkTopology
    grid: GridConfig
    damages: list[Damage]              # initial damages (emerge_min 0) and scheduled emergences
    crews: list[CrewSpec]
    events: list[Event] = field(default_factory=list)
    speed_kmh: float = DEFAULT_SPEED_KMH
    travel_matrix: dict[tuple[str, str], float] = field(default_factory=dict)
    partition: dict[str, int] | None = None
    seed: int = 0
    name: str = "scenario"

    def all_damages(self) -> dict[str, Damage]:
        out = {d.id: d for d in self.damages}
        for ev in self.events:
            if ev.kind == NEW_DAMAGE:
                d = _damage_from_dict(ev.payload["damage"], self.topology, emerge=ev.time)
                out[d.id] = d
        return out

    def coords(self) -> dict[str, tuple[float, float]]:
        pts = {}
        for c in self.crews:
            if c.x is not None:
                pts[c.depot] = (float(c.x), float(c.y))
            elif c.depot in self.topology.bus_index:
                bus = self.topology.buses[self.topology.bus_index[c.depot]]
                if bus.x is not None:
                    pts[c.depot] = (float(bus.x), float(bus.y))
        for d in self.all_damages().values():
            if d.x is not None:
                pts[d.id] = (float(d.x), float(d.y))
        return pts

    def base_travel(self) -> TravelTimeProvider:
        return TravelTimeProvider(self.coords(), self.speed_kmh, self.travel_matrix)

    def overrides(self) -> list[TravelOverride]:
        return [_override(ev) for ev in self.events if ev.kind == TRAVEL_CHANGE]


def _override(ev: Event) -> TravelOverride:
    p = ev.payload
    until = p.get("until")
    return TravelOverride(float(p["minutes"]), ev.time, None if until is None else float(until),
                          p.get("to"), p.get("from"))


def _damage_from_dict(d: dict, topology: NetworkTopology, emerge: float | None = None) -> Damage:
    frm, to = str(d["from"]), str(d["to"])
    x, y = d.get("x"), d.get("y")
    if x is None:
        a, b = topology.buses[topology.bus_index[frm]], topology.buses[topology.bus_index[to]]
        if a.x is not None and b.x is not None:
            x, y = 0.5 * (a.x + b.x), 0.5 * (a.y + b.y)
    by_crew = {str(k): float(v) for k, v in d.get("repair_by_crew", {}).items()}
    return Damage(str(d["id"]), (frm, to), float(d["repair_min"]),
                  float(d.get("emerge_min", 0.0) if emerge is None else emerge), by_crew,
                  None if x is None else float(x), None if y is None else float(y))


# ------------------------------------------------------------------ loading

class ScenarioError(ValueError):
    pass


def scenario_findings(data: dict) -> list[str]:
    """Schema-level problems of a scenario document (empty when well formed)."""
    out = []
    if "network" not in data:
        out.append("missing 'network' (path or inline object)")
    for key in ("damages", "crews"):
        if key not in data:
            out.append(f"missing '{key}' array")
        elif not isinstance(data[key], list):
            out.append(f"'{key}' must be an array")
    for i, d in enumerate(data.get("damages", []) if isinstance(data.get("damages"), list) else []):
        for k in ("id", "from", "to", "repair_min"):
            if k not in d:
                out.append(f"damages[{i}]: missing '{k}'")
    for i, c in enumerate(data.get("crews", []) if isinstance(data.get("crews"), list) else []):
        for k in ("id", "depot"):
            if k not in c:
                out.append(f"crews[{i}]: missing '{k}'")
    if isinstance(data.get("crews"), list) and not data["crews"]:
        out.append("'crews' must not be empty")
    for i, ev in enumerate(data.get("events", [])):
        kind = ev.get("kind")
        if kind not in EVENT_KINDS:
            out.append(f"events[{i}]: unknown kind {kind!r}")
            continue
        if "time" not in ev:
            out.append(f"events[{i}]: missing 'time'")
        need = {NEW_DAMAGE: ("damage",), TRAVEL_CHANGE: ("minutes",),
                REPAIR_CHANGE: ("damage", "repair_min")}[kind]
        for k in need:
            if k not in ev:
                out.append(f"events[{i}]: missing '{k}'")
    return out


def scenario_from_dict(data: dict, base_dir: Path | None = None) -> Scenario:
    problems = scenario_findings(data)
    if problems:
        raise ScenarioError("; ".join(problems))
    net = data["network"]
    if isinstance(net, str):
        path = Path(net)
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        topology, grid = load_network(path)
    else:
        topology, grid = network_from_dict(net)
    cfg = data.get("config", {})
    for k in ("horizon", "dt_min", "eps", "v_ref", "s_base"):
        if k in cfg:
            setattr(grid, k, type(getattr(grid, k))(cfg[k]))
    damages = [_damage_from_dict(d, topology) for d in data["damages"]]
    crews = [CrewSpec(str(c["id"]), str(c["depot"]), c.get("x"), c.get("y")) for c in data["crews"]]
    events = []
    for ev in data.get("events", []):
        payload = {k: v for k, v in ev.items() if k not in ("kind", "time")}
        events.append(Event(ev["kind"], float(ev["time"]), payload))
    events.sort(key=lambda e: e.time)
    matrix = {}
    for row in data.get("travel_matrix", []):
        matrix[(str(row["from"]), str(row["to"]))] = float(row["minutes"])
    part = data.get("partition")
    return Scenario(topology, grid, damages, crews, events,
                    float(data.get("speed_kmh", DEFAULT_SPEED_KMH)), matrix,
                    None if part is None else {str(k): int(v) for k, v in part.items()},
                    int(data.get("seed", 0)), str(data.get("name", "scenario")))


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return scenario_from_dict(data, path.parent)


def validate_scenario(scenario: Scenario) -> list[str]:
    out = list(validate_network(scenario.topology, scenario.grid))
    ids = set()
    for d in scenario.all_damages().values():
        if d.id in ids:
            out.append(f"damage {d.id}: duplicate id")
        ids.add(d.id)
        try:
            scenario.topology.line_between(*d.line)
        except KeyError:
            out.append(f"damage {d.id}: no line {d.line[0]}-{d.line[1]}")
    travel = scenario.base_travel()
    for c in scenario.crews:
        for d in ids:
            try:
                travel.travel(c.depot, d)
            except KeyError:
                out.append(f"crew {c.id}: no travel time from depot {c.depot} to {d}")
                break
    return out


# ------------------------------------------------------------------- state

@dataclass
class CrewTrack:
    """World-side crew state."""

    id: str
    depot: str
    loc: str | tuple[float, float]
    activity: str = "idle"                  # idle | wait | travel | repair
    target: str | None = None
    depart: float = 0.0
    depart_pos: tuple[float, float] | None = None
    arrive: float = 0.0
    repairing: str | None = None
    finish: float = 0.0
    route: list[str] = field(default_factory=list)


@dataclass
class SimConfig:
    ga: GAConfig = field(default_factory=GAConfig)
    coord: CoordinatorConfig = field(default_factory=CoordinatorConfig)
    n_subsystems: int = 2
    compare_solvers: bool = False
    max_steps: int = 400
    predesigned_max_horizon: int = 60


@dataclass
class SimState:
    clock: float
    step: int
    crews: list[CrewTrack]
    repaired: dict[str, float] = field(default_factory=dict)     # damage -> completion time
    known: set = field(default_factory=set)                      # reported, unrepaired
    overrides: list[TravelOverride] = field(default_factory=list)
    durations: dict[str, float] = field(default_factory=dict)    # reported repair times
    cost: float = 0.0
    prev_best: Chromosome | None = None
    warm: tuple | None = None
    applied: int = 0                                             # events consumed


@dataclass
class StepRecord:
    step: int
    time: float
    routes: dict[str, list[str]]
    actions: list[dict]
    switch_states: list[int]
    dispatch: dict
    cost: float
    ga_best: float | None
    solve_rounds: dict[str, int]
    converged: bool
    unconverged_evaluations: int


@dataclass
class PlanRecord:
    scenario: str
    strategy: str
    steps: list[StepRecord] = field(default_factory=list)
    positions: list[tuple] = field(default_factory=list)
    repaired: dict[str, float] = field(default_factory=dict)
    ga_traces: dict[int, list] = field(default_factory=dict)
    dmpc_trace: list = field(default_factory=list)

    @property
    def total_cost(self) -> float:
        return float(sum(s.cost for s in self.steps))


# ------------------------------------------------------------------ events

def apply_events(state: SimState, scenario: Scenario, t: float) -> SimState:
    """Make every event with activation <= t visible to the planner."""
    state = copy.copy(state)
    state.known = set(state.known)
    state.overrides = [o for o in state.overrides if o.end is None or o.end > t]
    state.durations = dict(state.durations)
    for d in scenario.damages:
        if d.emerge_min <= t and d.id not in state.repaired:
            state.known.add(d.id)
    events = scenario.events
    i = state.applied
    while i < len(events) and events[i].time <= t:
        ev = events[i]
        if ev.kind == NEW_DAMAGE:
            did = str(ev.payload["damage"]["id"])
            if did not in state.repaired:
                state.known.add(did)
        elif ev.kind == TRAVEL_CHANGE:
            ov = _override(ev)
            if ov.end is None or ov.end > t:
                state.overrides.append(ov)
        else:
            did = str(ev.payload["damage"])
            if did in state.repaired:
                logger.warning("repair duration change for repaired damage %s ignored", did)
            elif any(c.repairing == did for c in state.crews):
                logger.warning("repair duration change for damage %s already under repair ignored", did)
            else:
                state.durations[did] = float(ev.payload["repair_min"])
        i += 1
    state.applied = i
    return state


def _planner_overrides(state: SimState) -> list[TravelOverride]:
    # Expiry times are not known in advance; a reported change is assumed to persist.
    return [TravelOverride(o.minutes, o.start, None, o.to, o.frm) for o in state.overrides]


def _actual_duration(scenario: Scenario, damage: Damage, crew: str, t: float) -> float:
    dur = damage.duration(crew)
    for ev in scenario.events:
        if ev.kind == REPAIR_CHANGE and ev.time <= t and str(ev.payload["damage"]) == damage.id:
            dur = float(ev.payload["repair_min"])
    return dur


# --------------------------------------------------------------- planning

def _planning_crews(state: SimState, travel: TravelTimeProvider) -> list[Crew]:
    out = []
    t = state.clock
    for c in state.crews:
        if c.activity == "repair":
            out.append(Crew(c.id, c.depot, c.repairing, busy_until=c.finish,
                            ongoing_damage=c.repairing))
        elif c.activity == "travel":
            if travel.has_point_travel() and c.depart_pos is not None:
                pos = interpolate(c.depart_pos, travel.point(c.target), c.depart, c.arrive, t)
            else:
                pos = c.target
            out.append(Crew(c.id, c.depot, pos, heading=c.target, arrival=c.arrive))
        else:
            out.append(Crew(c.id, c.depot, c.loc))
    return out


def _planning_damages(state: SimState, all_damages: dict[str, Damage]) -> dict[str, Damage]:
    out = {}
    for did in sorted(state.known):
        d = all_damages[did]
        if did in state.durations:
            d = Damage(d.id, d.line, state.durations[did], d.emerge_min, {}, d.x, d.y)
        out[did] = d
    return out


def planning_problem(scenario: Scenario, state: SimState, partition: Partition, subs,
                     config: SimConfig, horizon: int | None = None) -> PlanningProblem:
    travel = scenario.base_travel().with_overrides(_planner_overrides(state))
    crews = _planning_crews(state, travel)
    damages = _planning_damages(state, scenario.all_damages())
    ongoing = {c.ongoing_damage for c in crews if c.ongoing_damage}
    pending = tuple(d for d in sorted(damages) if d not in ongoing)
    H = horizon if horizon is not None else scenario.grid.horizon
    window = Window(state.step, H)
    warm = state.warm if state.warm is not None and state.warm[0].lam.shape[1] == H else None
    return PlanningProblem(scenario.topology, scenario.grid, crews, damages, pending, travel,
                           window, partition, config.coord, warm, subs)


def warm_start(previous: Chromosome | None, problem: PlanningProblem, rng: np.random.Generator,
               size: int, shift: bool = True) -> list[Chromosome]:
    """Seed chromosome from the previous best (tail of its plan) plus random fill."""
    seeds = []
    H = problem.window.length
    if previous is not None:
        routes = [list(r) for r in decode(previous, problem.crews)]
        pending = set(problem.pending)
        routes = [[d for d in r if d in pending] for r in routes]
        present = {d for r in routes for d in r}
        for d in problem.pending:
            if d not in present:
                k = int(rng.integers(0, len(routes)))
                routes[k].insert(int(rng.integers(0, len(routes[k]) + 1)), d)
        bits = previous.bits_array()
        if bits.size:
            if shift:
                bits = np.concatenate([bits[:, 1:], bits[:, -1:]], axis=1)
            if bits.shape[1] >= H:
                bits = bits[:, :H]
            else:
                bits = np.concatenate([bits, np.repeat(bits[:, -1:], H - bits.shape[1], axis=1)], 1)
        else:
            bits = np.ones((problem.n_switch, H), dtype=np.uint8)
        seeds.append(encode(routes, bits))
    while len(seeds) < size:
        seeds.append(problem.random(rng))
    return seeds


def _coordinate_plan(problem: PlanningProblem, chromosome: Chromosome, mode: str):
    delta = problem.connectivity(chromosome).delta
    cfg = copy.copy(problem.coord)
    cfg.mode = mode
    sol, wasted = coordinate_warm(problem, delta, problem.window, problem.warm, cfg)
    return sol, sol.solve_rounds + wasted


# ---------------------------------------------------------------- the world

def _world_travel(scenario: Scenario) -> TravelTimeProvider:
    return scenario.base_travel().with_overrides(scenario.overrides())


def _depart(crew: CrewTrack, target: str, t: float, travel: TravelTimeProvider, log: list) -> None:
    frm = crew.loc
    tt = travel.travel(frm, target, t, crew.id)
    if tt >= BLOCKED_MIN:
        ov = travel.override(frm if isinstance(frm, str) else None, target, t)
        if ov is not None and ov.end is not None:
            # Road closed with a known reopening: wait, then leave.
            crew.activity, crew.target, crew.depart = "wait", target, ov.end
            log.append({"crew": crew.id, "action": "wait", "target": target, "time": t,
                        "until": ov.end})
            return
    crew.activity, crew.target = "travel", target
    crew.depart, crew.arrive = t, t + tt
    crew.depart_pos = travel.point(frm) if travel.has_point_travel() else None
    log.append({"crew": crew.id, "action": "depart", "target": target, "time": t,
                "arrive": t + tt})


def _advance_crew(crew: CrewTrack, t0: float, t1: float, scenario: Scenario, world: dict,
                  travel: TravelTimeProvider, repaired: dict, busy: set, log: list,
                  samples: list) -> None:
    t = t0
    for _ in range(1000):
        if crew.activity == "repair":
            if crew.finish > t1:
                return
            t = crew.finish
            repaired[crew.repairing] = t
            busy.discard(crew.repairing)
            log.append({"crew": crew.id, "action": "repaired", "damage": crew.repairing, "time": t})
            crew.loc, crew.activity, crew.repairing = crew.repairing, "idle", None
            _sample(samples, t, crew, travel)
        elif crew.activity == "wait":
            if crew.depart > t1:
                return
            t = crew.depart
            _depart(crew, crew.target, t, travel, log)
            _sample(samples, t, crew, travel)
        elif crew.activity == "travel":
            if crew.arrive > t1:
                return
            t = crew.arrive
            crew.loc, crew.activity = crew.target, "idle"
            crew.depart_pos = None
            log.append({"crew": crew.id, "action": "arrive", "target": crew.target, "time": t})
            _sample(samples, t, crew, travel)
            target, crew.target = crew.target, None
            if crew.route and crew.route[0] == target and target not in repaired and target not in busy:
                crew.route.pop(0)
                dur = _actual_duration(scenario, world[target], crew.id, t)
                crew.activity, crew.repairing, crew.finish = "repair", target, t + dur
                busy.add(target)
                log.append({"crew": crew.id, "action": "start", "damage": target, "time": t,
                            "finish": t + dur})
        else:
            while crew.route and (crew.route[0] in repaired or crew.route[0] in busy):
                crew.route.pop(0)
            if crew.route:
                nxt = crew.route[0]
                if crew.loc == nxt:
                    crew.target = nxt
                    crew.activity, crew.arrive = "travel", t
                    continue
                _depart(crew, nxt, t, travel, log)
            elif crew.loc != crew.depot:
                _depart(crew, crew.depot, t, travel, log)
            else:
                return
            _sample(samples, t, crew, travel)
            if crew.activity == "travel" and crew.arrive <= t and crew.target == crew.depot:
                crew.loc, crew.activity, crew.target = crew.depot, "idle", None
                return


def _sample(samples: list, t: float, crew: CrewTrack, travel: TravelTimeProvider) -> None:
    pos = _crew_point(crew, t, travel)
    samples.append((round(t, 6), crew.id, pos[0] if pos else None, pos[1] if pos else None,
                    crew.activity, crew.target or crew.repairing or ""))


def _crew_point(crew: CrewTrack, t: float, travel: TravelTimeProvider):
    if not travel.has_point_travel():
        return None
    try:
        if crew.activity == "travel" and crew.depart_pos is not None:
            return interpolate(crew.depart_pos, travel.point(crew.target), crew.depart, crew.arrive, t)
        return travel.point(crew.loc)
    except KeyError:
        return None


def _redirect(crew: CrewTrack, route: list[str], t: float, travel: TravelTimeProvider, log: list):
    """Install a new route; a travelling crew turns toward a new first target if it can."""
    crew.route = list(route)
    if crew.activity not in ("travel", "wait"):
        return
    first = route[0] if route else crew.depot
    if first == crew.target:
        return
    if crew.activity == "wait":
        crew.activity, crew.target = "idle", None
        return
    if travel.has_point_travel() and crew.depart_pos is not None:
        crew.loc = interpolate(crew.depart_pos, travel.point(crew.target), crew.depart, crew.arrive, t)
        crew.activity, crew.target, crew.depart_pos = "idle", None, None
        log.append({"crew": crew.id, "action": "redirect", "time": t})


def actual_delta(scenario: Scenario, world: dict, repaired: dict, bits: np.ndarray, stamp: float):
    """Line availability at ``stamp`` from the true damage and repair times."""
    topo = scenario.topology
    delta = np.ones(topo.n_line, dtype=np.uint8)
    for row, l in enumerate(topo.switched):
        delta[l] = bits[row]
    for d in world.values():
        if d.emerge_min <= stamp and not repaired.get(d.id, math.inf) <= stamp + 1e-9:
            delta[topo.line_between(*d.line)] = 0
    return delta


def executed_dispatch(scenario: Scenario, delta_col: np.ndarray, step: int,
                      coord: CoordinatorConfig) -> tuple[float, DispatchVars]:
    """Single-step dispatch for the availability that actually held over the step."""
    win = Window(step, 1)
    inst = build_system_qp(scenario.topology, scenario.grid, delta_col.reshape(-1, 1), win)
    sol = solve_qp(inst, tol=coord.qp_tol)
    if not sol.optimal:
        raise RuntimeError(f"executed dispatch QP ended with status {sol.status}")
    return sol.objective, extract_dispatch(inst, sol.x)


# ------------------------------------------------------------------ driver

def _initial_state(scenario: Scenario) -> SimState:
    crews = [CrewTrack(c.id, c.depot, c.depot) for c in scenario.crews]
    return SimState(0.0, 0, crews)


def _partition(scenario: Scenario, config: SimConfig) -> Partition:
    if scenario.partition is not None:
        return from_assignment(scenario.topology, scenario.partition)
    n_s = min(config.n_subsystems, scenario.topology.n_bus)
    return partition_network(scenario.topology, n_s, scenario.seed)


def _horizon_bound(scenario: Scenario) -> int:
    """Steps needed for one crew to repair every initial damage serially."""
    travel = _world_travel(scenario)
    dmg = [d for d in scenario.damages if d.emerge_min == 0]
    locs = [c.depot for c in scenario.crews] + [d.id for d in dmg]
    total = 0.0
    for d in dmg:
        legs = [travel.base_minutes(travel.point(a), travel.point(d.id))
                if travel.has_point_travel() and a in travel.coords and d.id in travel.coords
                else travel.travel(a, d.id) for a in locs if a != d.id]
        total += d.repair_min + max(legs, default=0.0)
    return max(1, int(math.ceil(total / scenario.grid.dt_min)) + 1)


def predesigned_baseline(scenario: Scenario, config: SimConfig, partition: Partition | None = None,
                         cache: dict | None = None):
    """One GA solve at t=0 over a horizon long enough for serial repair of all damages."""
    partition = partition if partition is not None else _partition(scenario, config)
    subs = subsystems(partition, scenario.topology)
    state = apply_events(_initial_state(scenario), scenario, 0.0)
    H = min(_horizon_bound(scenario), config.predesigned_max_horizon)
    problem = planning_problem(scenario, state, partition, subs, config, horizon=H)
    rng = np.random.default_rng([config.ga.seed, scenario.seed, 0])
    seeds = [heuristic_seed(problem)] if problem.pending or problem.n_switch else []
    ev = Evaluator(problem, cache=cache)
    result = run_ga(problem, config.ga, seeds, ev, rng)
    return problem, result


def run_scenario(scenario: Scenario, strategy: str, config: SimConfig | None = None,
                 baseline=None) -> tuple[PlanRecord, float]:
    """Simulate ``strategy`` against the scenario's actual events.

    ``baseline`` is an optional (problem, GAResult) pair from
    ``predesigned_baseline`` with the same config, so paired runs can share it.
    """
    config = config if config is not None else SimConfig()
    if strategy not in (REALTIME, PREDESIGNED):
        raise ValueError(f"unknown strategy {strategy!r}")
    partition = _partition(scenario, config)
    subs = subsystems(partition, scenario.topology)
    cache: dict = {}
    if baseline is None:
        baseline = predesigned_baseline(scenario, config, partition, cache)
    base_problem, base = baseline
    world = scenario.all_damages()
    travel_w = _world_travel(scenario)
    state = _initial_state(scenario)
    record = PlanRecord(scenario.name, strategy)
    record.ga_traces[-1] = base.trace
    repaired: dict[str, float] = {}
    busy: set = set()
    dt = scenario.grid.dt_min

    fixed_routes = [list(r) for r in decode(base.best, base_problem.crews)]
    fixed_bits = base.best.bits_array()
    if strategy == PREDESIGNED:
        for c, r in zip(state.crews, fixed_routes):
            c.route = list(r)
    appended: set = set(base_problem.pending)

    for step in range(config.max_steps):
        t = step * dt
        state.clock, state.step = t, step
        state.repaired = dict(repaired)
        state = apply_events(state, scenario, t)
        state.known -= set(repaired)
        rounds: dict[str, int] = {}
        ga_best = None
        converged = True
        unconv = 0
        if strategy == REALTIME:
            problem = planning_problem(scenario, state, partition, subs, config)
            rng = np.random.default_rng([config.ga.seed, scenario.seed, step + 1])
            if state.prev_best is None:
                seeds = warm_start(base.best, problem, rng, 1, shift=False)
            else:
                seeds = warm_start(state.prev_best, problem, rng, 1)
            ev = Evaluator(problem, cache=cache)
            res = run_ga(problem, config.ga, seeds, ev, rng)
            record.ga_traces[step] = res.trace
            best = res.best
            ga_best = res.fitness.cost
            unconv = res.unconverged
            routes = [list(r) for r in decode(best, problem.crews)]
            modes = [config.coord.mode]
            if config.compare_solvers:
                modes = ["aitken", "standard"]
            sol = None
            for mode in modes:
                s, rounds[mode] = _coordinate_plan(problem, best, mode)
                converged &= s.converged
                if mode == config.coord.mode:
                    sol = s
                    record.dmpc_trace.extend((step,) + row for row in s.trace)
            state.prev_best = best
            state.warm = (sol.multipliers.shifted(), sol.state.shifted()) if sol is not None else None
            log: list = []
            for c, r in zip(state.crews, routes):
                if c.activity == "repair":
                    r = [d for d in r if d != c.repairing]
                _redirect(c, r, t, travel_w, log)
            bits = best.bits_array()[:, 0] if best.bits_array().size else np.zeros(0, np.uint8)
        else:
            log = []
            # Damages reported after t=0 wait until every planned route is implemented,
            # then go to the crew expected to finish first.
            new = sorted(d for d in state.known if d not in appended)
            idle = all(not c.route and c.activity != "repair" for c in state.crews)
            if new and idle:
                problem = planning_problem(scenario, state, partition, subs, config)
                for did in new:
                    finishes = []
                    for c, pc in zip(state.crews, problem.crews):
                        sched = schedule_route(pc, [d for d in c.route if d in problem.damages],
                                               problem.travel, t, problem.damages)
                        end = max([r.finish for r in sched.repairs] +
                                  ([sched.ongoing.finish] if sched.ongoing else []) + [t])
                        finishes.append(end)
                    k = min(range(len(state.crews)), key=lambda i: (finishes[i], i))
                    state.crews[k].route.append(did)
                    appended.add(did)
            col = min(step, fixed_bits.shape[1] - 1) if fixed_bits.size else 0
            bits = fixed_bits[:, col] if fixed_bits.size else np.zeros(0, np.uint8)
            routes = [list(c.route) for c in state.crews]

        for c in state.crews:
            _sample(record.positions, t, c, travel_w)
            _advance_crew(c, t, t + dt, scenario, world, travel_w, repaired, busy, log,
                          record.positions)
        delta_col = actual_delta(scenario, world, repaired, bits, t + dt)
        cost, dv = executed_dispatch(scenario, delta_col, step, config.coord)
        state.cost += cost
        record.steps.append(StepRecord(step, t, {c.id: r for c, r in zip(state.crews, routes)},
                                       log, [int(b) for b in bits], dv.to_dict(), cost, ga_best,
                                       rounds, converged, unconv))
        done = (len(repaired) == len(world)
                and all(c.activity == "idle" and c.loc == c.depot for c in state.crews))
        if done:
            break
    else:
        logger.warning("scenario %s stopped after %d steps", scenario.name, config.max_steps)
    record.repaired = dict(repaired)
    return record, record.total_cost


# ------------------------------------------------------------------ output

def write_outputs(record: PlanRecord, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"scenario": record.scenario, "strategy": record.strategy,
           "total_cost": round(record.total_cost, 9),
           "repaired": {k: round(v, 6) for k, v in sorted(record.repaired.items())},
           "steps": [{"step": s.step, "time": s.time, "routes": s.routes, "actions": s.actions,
                      "switch_states": s.switch_states, "dispatch": s.dispatch,
                      "cost": round(s.cost, 9),
                      "ga_best": None if s.ga_best is None else round(s.ga_best, 9),
                      "solve_rounds": s.solve_rounds, "converged": s.converged,
                      "unconverged_evaluations": s.unconverged_evaluations}
                     for s in record.steps]}
    (out / "plan.json").write_text(json.dumps(doc, indent=1, sort_keys=True, default=_jsonable))
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "time_min", "step_cost", "cumulative_cost", "ga_best",
                    "solve_rounds_aitken", "solve_rounds_standard", "converged"])
        cum = 0.0
        for s in record.steps:
            cum += s.cost
            w.writerow([s.step, s.time, f"{s.cost:.9g}", f"{cum:.9g}",
                        "" if s.ga_best is None else f"{s.ga_best:.9g}",
                        s.solve_rounds.get("aitken", ""), s.solve_rounds.get("standard", ""),
                        int(s.converged)])
    with open(out / "routes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_min", "crew", "x", "y", "activity", "target"])
        for row in record.positions:
            w.writerow(["" if v is None else (f"{v:.6g}" if isinstance(v, float) else v)
                        for v in row])
    with open(out / "dmpc_trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "iteration", "max_multiplier_delta", "max_consensus_gap", "objective"])
        for row in record.dmpc_trace:
            w.writerow([row[0], row[1]] + [f"{float(v):.9g}" for v in row[2:]])
    with open(out / "ga_trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "generation", "best_fitness", "mean_fitness"])
        for step in sorted(record.ga_traces):
            for gen, best, mean in record.ga_traces[step]:
                w.writerow([step, gen, f"{best:.9g}", f"{mean:.9g}"])


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(type(v))
