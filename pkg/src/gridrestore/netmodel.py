"""Network data model and assembly of the continuous dispatch QP.

Voltages are carried in per-unit of ``GridConfig.v_ref``; powers in kW/kvar.
Each line has a single signed flow per step, positive from ``from_bus`` to
``to_bus``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import networkx as nx
import numpy as np
import scipy.sparse as sp

from .qpsolve import QPInstance

# kW * ohm / V^2 -> per-unit voltage drop
_KW_TO_W = 1000.0


@dataclass
class Bus:
    id: str
    cost: list[float]
    p_max: list[float]
    q_max: list[float]
    dg_p_max: list[float] = field(default_factory=lambda: [0.0])
    dg_q_max: list[float] = field(default_factory=lambda: [0.0])
    x: float | None = None
    y: float | None = None

    def profiles(self) -> dict[str, list[float]]:
        return {"cost": self.cost, "p_max": self.p_max, "q_max": self.q_max,
                "dg_p_max": self.dg_p_max, "dg_q_max": self.dg_q_max}


@dataclass
class Line:
    from_bus: str
    to_bus: str
    r: float
    x: float
    p_lim: float
    q_lim: float
    switch: bool = False
    damage: str | None = None

    @property
    def name(self) -> str:
        return f"{self.from_bus}-{self.to_bus}"


@dataclass
class GridConfig:
    v_ref: float = 4160.0       # volts
    eps: float = 0.05
    dt_min: float = 10.0
    horizon: int = 6
    big_m: float | None = None  # per-unit; derived from the network when None
    s_base: float = 100.0       # kVA; unit of the interconnect power copies


@dataclass(frozen=True)
class Window:
    """Planning window of ``length`` steps starting at clock ``start * dt``.

    Step k (1-based) is stamped at ``(start + k) * dt`` and reads profile
    entry ``start + k - 1``.
    """

    start: int
    length: int

    def stamps(self, dt: float) -> np.ndarray:
        return (self.start + np.arange(1, self.length + 1)) * dt


class NetworkTopology:
    def __init__(self, buses: Sequence[Bus], lines: Sequence[Line]):
        self.buses = list(buses)
        self.lines = list(lines)
        self.bus_index = {b.id: i for i, b in enumerate(self.buses)}
        self.line_index = {}
        for i, ln in enumerate(self.lines):
            self.line_index.setdefault((ln.from_bus, ln.to_bus), i)
            self.line_index.setdefault((ln.to_bus, ln.from_bus), i)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_line(self) -> int:
        return len(self.lines)

    @property
    def switched(self) -> list[int]:
        """Indices of lines carrying a switch, in file order."""
        return [i for i, ln in enumerate(self.lines) if ln.switch]

    def line_between(self, a: str, b: str) -> int:
        try:
            return self.line_index[(a, b)]
        except KeyError:
            raise KeyError(f"no line between buses {a} and {b}") from None

    def endpoints(self) -> tuple[np.ndarray, np.ndarray]:
        f = np.array([self.bus_index[ln.from_bus] for ln in self.lines], dtype=int)
        t = np.array([self.bus_index[ln.to_bus] for ln in self.lines], dtype=int)
        return f, t

    def graph(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(self.n_bus))
        f, t = self.endpoints()
        for i, (a, b) in enumerate(zip(f, t)):
            g.add_edge(int(a), int(b), line=i)
        return g

    def profile(self, key: str, window: Window) -> np.ndarray:
        """Per-bus profile ``key`` over the window, shape (n_bus, T); last value held."""
        out = np.empty((self.n_bus, window.length))
        idx = window.start + np.arange(window.length)
        for i, bus in enumerate(self.buses):
            vals = np.asarray(bus.profiles()[key], dtype=float)
            out[i] = vals[np.minimum(idx, vals.size - 1)]
        return out

    def with_damages(self, damaged: dict[tuple[str, str], str]) -> "NetworkTopology":
        """Copy with ``damage`` annotations set from a {(from, to): damage_id} map."""
        lines = []
        by_line = {}
        for key, did in damaged.items():
            by_line[self.line_between(*key)] = did
        for i, ln in enumerate(self.lines):
            lines.append(Line(ln.from_bus, ln.to_bus, ln.r, ln.x, ln.p_lim, ln.q_lim,
                              ln.switch, by_line.get(i, ln.damage)))
        return NetworkTopology(self.buses, lines)


@dataclass
class DispatchVars:
    PL: np.ndarray
    QL: np.ndarray
    PDG: np.ndarray
    QDG: np.ndarray
    V: np.ndarray   # per-unit
    PT: np.ndarray
    QT: np.ndarray

    def step(self, k: int) -> "DispatchVars":
        sl = slice(k, k + 1)
        return DispatchVars(self.PL[:, sl], self.QL[:, sl], self.PDG[:, sl], self.QDG[:, sl],
                            self.V[:, sl], self.PT[:, sl], self.QT[:, sl])

    def to_dict(self) -> dict:
        return {k: np.round(getattr(self, k), 9).tolist()
                for k in ("PL", "QL", "PDG", "QDG", "V", "PT", "QT")}


# --------------------------------------------------------------------- checks

def validate_network(topology: NetworkTopology, config: GridConfig) -> list[str]:
    """Return a list of findings; the network is valid iff the list is empty."""
    findings = []
    seen = set()
    for bus in topology.buses:
        if bus.id in seen:
            findings.append(f"duplicate bus id {bus.id}")
        seen.add(bus.id)
        lengths = {k: len(v) for k, v in bus.profiles().items()}
        if any(n == 0 for n in lengths.values()):
            findings.append(f"bus {bus.id}: empty profile")
            continue
        multi = {n for n in lengths.values() if n != 1}
        if len(multi) > 1:
            findings.append(f"bus {bus.id}: profile-length mismatch {lengths}")
        elif multi and min(multi) < config.horizon:
            findings.append(f"bus {bus.id}: profile shorter than horizon {config.horizon}")
        for key, vals in bus.profiles().items():
            if any(v < 0 for v in vals):
                findings.append(f"bus {bus.id}: negative {key}")

    pairs = set()
    for ln in topology.lines:
        for end in (ln.from_bus, ln.to_bus):
            if end not in topology.bus_index:
                findings.append(f"line {ln.name}: unknown bus {end}")
        key = frozenset((ln.from_bus, ln.to_bus))
        if len(key) == 1:
            findings.append(f"line {ln.name}: self loop")
        if key in pairs:
            findings.append(f"line {ln.name}: duplicate line endpoints")
        pairs.add(key)
        if ln.p_lim <= 0 or ln.q_lim <= 0:
            findings.append(f"line {ln.name}: nonpositive flow limit")
        if ln.r < 0 or ln.x < 0:
            findings.append(f"line {ln.name}: negative impedance")

    if not any(f.startswith("line") and "unknown bus" in f for f in findings) and topology.n_bus:
        g = topology.graph()
        comps = list(nx.connected_components(g))
        if len(comps) > 1:
            main = max(comps, key=len)
            for comp in comps:
                if comp is not main:
                    for i in sorted(comp):
                        findings.append(f"bus {topology.buses[i].id}: disconnected")

    if not 0 < config.eps < 1:
        findings.append("config: eps must lie in (0, 1)")
    if config.dt_min <= 0:
        findings.append("config: dt_min must be positive")
    if config.horizon < 1:
        findings.append("config: horizon must be at least 1")
    if config.v_ref <= 0:
        findings.append("config: v_ref must be positive")
    return findings


def drop_coefficient(config: GridConfig) -> float:
    """Per-unit voltage change per (ohm * kW)."""
    return _KW_TO_W / config.v_ref ** 2


def big_m(topology: NetworkTopology, config: GridConfig) -> float:
    if config.big_m is not None:
        return config.big_m
    k = drop_coefficient(config)
    worst = max((k * (ln.r * ln.p_lim + ln.x * ln.q_lim) for ln in topology.lines), default=0.0)
    return 2 * config.eps + worst


def load_loss_cost(vars: DispatchVars, topology: NetworkTopology, window: Window) -> float:
    cost = topology.profile("cost", window)
    pmax = topology.profile("p_max", window)
    if vars.PL.shape != cost.shape:
        raise ValueError(f"dispatch has shape {vars.PL.shape}, window needs {cost.shape}")
    return float(np.sum(cost * (pmax - vars.PL)))


# ------------------------------------------------------------------ assembly

@dataclass(frozen=True)
class LinkSpec:
    """A cut line as seen from one subsystem.

    ``role`` is "out" on the side owning the line physics and "in" on the
    receiving side; ``bus`` is this subsystem's terminal, ``sign`` is +1 when
    the line's from-bus is on the out side.
    """

    line: int
    role: str
    bus: int
    sign: int


class _Builder:
    def __init__(self, n_hint: int = 0):
        self.n = 0
        self.lb: list[np.ndarray] = []
        self.ub: list[np.ndarray] = []
        self.index: dict[str, np.ndarray] = {}
        self.eq_rows: list[tuple[list[int], list[float], float]] = []
        self.in_rows: list[tuple[list[int], list[float], float]] = []

    def block(self, name, lb, ub):
        lb = np.asarray(lb, dtype=float)
        ub = np.asarray(ub, dtype=float)
        idx = np.arange(self.n, self.n + lb.size).reshape(lb.shape)
        self.n += lb.size
        self.lb.append(lb.ravel())
        self.ub.append(ub.ravel())
        self.index[name] = idx
        return idx

    def eq(self, cols, vals, rhs):
        self.eq_rows.append((cols, vals, rhs))

    def le(self, cols, vals, rhs):
        self.in_rows.append((cols, vals, rhs))

    @staticmethod
    def _matrix(rows, n):
        data, ri, ci, rhs = [], [], [], []
        for r, (cols, vals, b) in enumerate(rows):
            ri.extend([r] * len(cols))
            ci.extend(cols)
            data.extend(vals)
            rhs.append(b)
        mat = sp.csr_matrix((data, (ri, ci)), shape=(len(rows), n))
        mat.sum_duplicates()
        return mat, np.asarray(rhs, dtype=float)

    def finish(self, Pdiag, q, const) -> QPInstance:
        A, b = self._matrix(self.eq_rows, self.n)
        G, h = self._matrix(self.in_rows, self.n)
        lb = np.concatenate(self.lb) if self.lb else np.zeros(0)
        ub = np.concatenate(self.ub) if self.ub else np.zeros(0)
        P = sp.diags(Pdiag, format="csc")
        return QPInstance(P=P, q=q, A=A, b=b, G=G, h=h, lb=lb, ub=ub, const=const,
                          index=self.index)


def _check_delta(delta: np.ndarray, topology: NetworkTopology, window: Window) -> np.ndarray:
    delta = np.asarray(delta)
    if delta.shape != (topology.n_line, window.length):
        raise ValueError(f"connectivity has shape {delta.shape}, expected "
                         f"{(topology.n_line, window.length)}")
    return delta.astype(bool)


def _assemble(topology: NetworkTopology, config: GridConfig, delta, window: Window,
              buses: np.ndarray, lines: np.ndarray, links: Sequence[LinkSpec] = (),
              multipliers=None, prev=None, gamma_b: float = 0.0, gamma_c: float = 0.0
              ) -> QPInstance:
    delta = _check_delta(delta, topology, window)
    T = window.length
    eps = config.eps
    M = big_m(topology, config)
    kdrop = drop_coefficient(config)

    cost = topology.profile("cost", window)[buses]
    pmax = topology.profile("p_max", window)[buses]
    qmax = topology.profile("q_max", window)[buses]
    dgp = topology.profile("dg_p_max", window)[buses]
    dgq = topology.profile("dg_q_max", window)[buses]
    nb, nl = buses.size, lines.size
    fidx, tidx = topology.endpoints()
    local = {int(g): i for i, g in enumerate(buses)}

    plim = np.array([topology.lines[l].p_lim for l in lines], dtype=float).reshape(nl, 1)
    qlim = np.array([topology.lines[l].q_lim for l in lines], dtype=float).reshape(nl, 1)
    dl = delta[lines] if nl else np.zeros((0, T), bool)

    bld = _Builder()
    iPL = bld.block("PL", np.zeros((nb, T)), pmax)
    iQL = bld.block("QL", np.zeros((nb, T)), np.where(pmax > 0, qmax, 0.0))
    iPDG = bld.block("PDG", np.zeros((nb, T)), dgp)
    iQDG = bld.block("QDG", np.zeros((nb, T)), dgq)
    iV = bld.block("V", np.full((nb, T), 1 - eps), np.full((nb, T), 1 + eps))
    iPT = bld.block("PT", -(dl * plim), dl * plim)
    iQT = bld.block("QT", -(dl * qlim), dl * qlim)

    nk = len(links)
    kl = np.array([lk.line for lk in links], dtype=int)
    dk = delta[kl] if nk else np.zeros((0, T), bool)
    kplim = np.array([topology.lines[l].p_lim for l in kl], dtype=float).reshape(nk, 1)
    kqlim = np.array([topology.lines[l].q_lim for l in kl], dtype=float).reshape(nk, 1)
    # Interconnect powers are carried in units of s_base (kVA).
    sb = config.s_base
    iLP = bld.block("LP", -(dk * kplim) / sb, dk * kplim / sb)
    iLQ = bld.block("LQ", -(dk * kqlim) / sb, dk * kqlim / sb)
    iLV = bld.block("LV", np.full((nk, T), 1 - eps), np.full((nk, T), 1 + eps))

    for t in range(T):
        # Reactive load follows active load at the demand power factor.
        for i in range(nb):
            if pmax[i, t] > 0 and qmax[i, t] > 0:
                bld.eq([iQL[i, t], iPL[i, t]], [1.0, -qmax[i, t] / pmax[i, t]], 0.0)

        pcols = [[iPDG[i, t], iPL[i, t]] for i in range(nb)]
        pvals = [[1.0, -1.0] for _ in range(nb)]
        qcols = [[iQDG[i, t], iQL[i, t]] for i in range(nb)]
        qvals = [[1.0, -1.0] for _ in range(nb)]
        for j, l in enumerate(lines):
            a, b = local[int(fidx[l])], local[int(tidx[l])]
            pcols[a].append(iPT[j, t]); pvals[a].append(-1.0)
            pcols[b].append(iPT[j, t]); pvals[b].append(1.0)
            qcols[a].append(iQT[j, t]); qvals[a].append(-1.0)
            qcols[b].append(iQT[j, t]); qvals[b].append(1.0)
        for j, lk in enumerate(links):
            a = local[lk.bus]
            sgn = (-1.0 if lk.role == "out" else 1.0) * sb
            pcols[a].append(iLP[j, t]); pvals[a].append(sgn)
            qcols[a].append(iLQ[j, t]); qvals[a].append(sgn)
        for i in range(nb):
            bld.eq(pcols[i], pvals[i], 0.0)
            bld.eq(qcols[i], qvals[i], 0.0)

        for j, l in enumerate(lines):
            ln = topology.lines[l]
            a, b = local[int(fidx[l])], local[int(tidx[l])]
            cols = [iV[a, t], iV[b, t], iPT[j, t], iQT[j, t]]
            vals = [1.0, -1.0, kdrop * ln.r, kdrop * ln.x]
            _voltage_relation(bld, cols, vals, bool(dl[j, t]), M)

        for j, lk in enumerate(links):
            a = local[lk.bus]
            if lk.role == "in":
                bld.eq([iLV[j, t], iV[a, t]], [1.0, -1.0], 0.0)
                continue
            ln = topology.lines[lk.line]
            # out side owns the line: line flow (from->to) = sign * LP
            if lk.sign > 0:
                cols = [iV[a, t], iLV[j, t], iLP[j, t], iLQ[j, t]]
                vals = [1.0, -1.0, kdrop * sb * ln.r, kdrop * sb * ln.x]
            else:
                cols = [iLV[j, t], iV[a, t], iLP[j, t], iLQ[j, t]]
                vals = [1.0, -1.0, -kdrop * sb * ln.r, -kdrop * sb * ln.x]
            _voltage_relation(bld, cols, vals, bool(dk[j, t]), M)

    n = bld.n
    q = np.zeros(n)
    q[iPL.ravel()] = -cost.ravel()
    const = float(np.sum(cost * pmax))
    base = bld.finish(np.zeros(n), q, const)
    if nk and multipliers is not None:
        return with_interconnect_terms(base, links, multipliers, prev, gamma_b, gamma_c)
    return base


def with_interconnect_terms(base: QPInstance, links: Sequence[LinkSpec], multipliers, prev,
                            gamma_b: float, gamma_c: float) -> QPInstance:
    """Add the augmented-Lagrangian link terms to a subsystem instance built without them."""
    if gamma_b < gamma_c:
        raise ValueError("gamma_b must not be smaller than gamma_c")
    nk = len(links)
    q = base.q.copy()
    Pdiag = base.P.diagonal().copy()
    const = base.const
    sel = kl_pos(links, multipliers)
    mults = (multipliers.lam[sel], multipliers.mu[sel], multipliers.nu[sel])
    own_prev, other_prev = prev.sided(sel, [lk.role for lk in links])
    sgn = np.array([1.0 if lk.role == "in" else -1.0 for lk in links]).reshape(nk, 1)
    for name, m, own, oth in zip(("LP", "LQ", "LV"), mults, own_prev, other_prev):
        blk = base.index[name].ravel()
        q[blk] += (sgn * m - gamma_c * oth - (gamma_b - gamma_c) * own).ravel()
        Pdiag[blk] += gamma_b
        const += float(np.sum(0.5 * gamma_c * oth ** 2 + 0.5 * (gamma_b - gamma_c) * own ** 2))
    return QPInstance(P=sp.diags(Pdiag, format="csc"), q=q, A=base.A, b=base.b, G=base.G,
                      h=base.h, lb=base.lb, ub=base.ub, const=const, index=base.index)


def kl_pos(links: Sequence[LinkSpec], multipliers) -> np.ndarray:
    """Rows of the multiplier arrays belonging to ``links``."""
    return np.array([multipliers.row_of[lk.line] for lk in links], dtype=int)


def _voltage_relation(bld: _Builder, cols, vals, closed: bool, M: float) -> None:
    if closed:
        bld.eq(cols, vals, 0.0)
    else:
        bld.le(cols, vals, M)
        bld.le(cols, [-v for v in vals], M)


def build_system_qp(topology: NetworkTopology, config: GridConfig, delta,
                    window: Window) -> QPInstance:
    """Centralized dispatch QP for fixed line availability ``delta`` (lines x steps)."""
    return _assemble(topology, config, delta, window,
                     np.arange(topology.n_bus), np.arange(topology.n_line))


def build_subsystem_qp(subsystem, config: GridConfig, delta, multipliers, prev,
                       gamma_b: float, gamma_c: float, window: Window) -> QPInstance:
    """Local QP of one subsystem with augmented-Lagrangian interconnect terms.

    ``subsystem`` is a :class:`gridrestore.partition.Subsystem`; ``multipliers``
    and ``prev`` are the coordinator's MultiplierSet and InterconnectState.
    """
    if gamma_b < gamma_c:
        raise ValueError("gamma_b must not be smaller than gamma_c (augmented term nonconvex)")
    links = subsystem.links
    if links:
        missing = [lk.line for lk in links if lk.line not in multipliers.row_of]
        if missing:
            raise KeyError(f"no multipliers for interconnect lines {missing}")
        if multipliers.lam.shape[1] != window.length:
            raise ValueError("multipliers do not cover the window")
    return _assemble(subsystem.topology, config, delta, window, subsystem.buses,
                     subsystem.lines, links, multipliers, prev, gamma_b, gamma_c)


def build_subsystem_base(subsystem, config: GridConfig, delta, window: Window) -> QPInstance:
    """Subsystem instance without link objective terms (see :func:`with_interconnect_terms`)."""
    return _assemble(subsystem.topology, config, delta, window, subsystem.buses,
                     subsystem.lines, subsystem.links)


def extract_dispatch(instance: QPInstance, x: np.ndarray) -> DispatchVars:
    ix = instance.index
    return DispatchVars(*(x[ix[k]] for k in ("PL", "QL", "PDG", "QDG", "V", "PT", "QT")))


def balance_residuals(topology: NetworkTopology, vars: DispatchVars) -> tuple[float, float]:
    """Max active/reactive bus balance residuals of a network-wide dispatch."""
    f, t = topology.endpoints()
    inj_p = vars.PDG - vars.PL
    inj_q = vars.QDG - vars.QL
    np.subtract.at(inj_p, f, vars.PT)
    np.add.at(inj_p, t, vars.PT)
    np.subtract.at(inj_q, f, vars.QT)
    np.add.at(inj_q, t, vars.QT)
    return float(np.max(np.abs(inj_p), initial=0.0)), float(np.max(np.abs(inj_q), initial=0.0))


def voltage_residuals(topology: NetworkTopology, config: GridConfig, vars: DispatchVars,
                      delta) -> float:
    """Max |V_n - V_m + drop| over closed lines (per-unit)."""
    f, t = topology.endpoints()
    r = np.array([ln.r for ln in topology.lines]).reshape(-1, 1)
    x = np.array([ln.x for ln in topology.lines]).reshape(-1, 1)
    expr = vars.V[f] - vars.V[t] + drop_coefficient(config) * (r * vars.PT + x * vars.QT)
    closed = np.asarray(delta, bool)
    return float(np.max(np.abs(expr[closed]), initial=0.0))


# ---------------------------------------------------------------------- files

def _as_list(v) -> list[float]:
    if isinstance(v, (int, float)):
        return [float(v)]
    return [float(a) for a in v]


def network_from_dict(data: dict) -> tuple[NetworkTopology, GridConfig]:
    buses = []
    for b in data["buses"]:
        buses.append(Bus(id=str(b["id"]), cost=_as_list(b.get("cost", 0.0)),
                         p_max=_as_list(b.get("p_max", 0.0)), q_max=_as_list(b.get("q_max", 0.0)),
                         dg_p_max=_as_list(b.get("dg_p_max", 0.0)),
                         dg_q_max=_as_list(b.get("dg_q_max", 0.0)),
                         x=b.get("x"), y=b.get("y")))
    lines = []
    for ln in data["lines"]:
        lines.append(Line(from_bus=str(ln["from"]), to_bus=str(ln["to"]), r=float(ln["r"]),
                          x=float(ln["x"]), p_lim=float(ln["p_lim"]), q_lim=float(ln["q_lim"]),
                          switch=bool(ln.get("switch", False)),
                          damage=None if ln.get("damage") is None else str(ln["damage"])))
    cfg = data.get("config", {})
    config = GridConfig(v_ref=float(cfg.get("v_ref", 4160.0)), eps=float(cfg.get("eps", 0.05)),
                        dt_min=float(cfg.get("dt_min", 10.0)), horizon=int(cfg.get("horizon", 6)),
                        big_m=cfg.get("big_m"), s_base=float(cfg.get("s_base", 100.0)))
    return NetworkTopology(buses, lines), config


def network_to_dict(topology: NetworkTopology, config: GridConfig) -> dict:
    buses = []
    for b in topology.buses:
        d = {"id": b.id, "cost": b.cost, "p_max": b.p_max, "q_max": b.q_max,
             "dg_p_max": b.dg_p_max, "dg_q_max": b.dg_q_max}
        if b.x is not None:
            d["x"], d["y"] = b.x, b.y
        buses.append(d)
    lines = [{"from": ln.from_bus, "to": ln.to_bus, "r": ln.r, "x": ln.x, "p_lim": ln.p_lim,
              "q_lim": ln.q_lim, "switch": ln.switch, "damage": ln.damage}
             for ln in topology.lines]
    return {"buses": buses, "lines": lines,
            "config": {"v_ref": config.v_ref, "eps": config.eps, "dt_min": config.dt_min,
                       "horizon": config.horizon, "s_base": config.s_base}}


def load_network(path) -> tuple[NetworkTopology, GridConfig]:
    return network_from_dict(json.loads(Path(path).read_text()))
