"""Augmented-Lagrangian coordination of subsystem QPs.

Each link carries an "out" copy (owned by the lower-indexed subsystem, which
also holds the line physics) and an "in" copy of (P, Q, V).  Multipliers are
updated with ``lam + gamma_c * (in - out)``; in ``aitken`` mode two such
updates are combined by Aitken's delta-squared extrapolation.
"""
from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .netmodel import (DispatchVars, GridConfig, NetworkTopology, Window, build_subsystem_base,
                       extract_dispatch, load_loss_cost, with_interconnect_terms)
from .partition import Partition, Subsystem, subsystems
from .qpsolve import DEFAULT_TOL, PreparedQP

logger = logging.getLogger(__name__)

STANDARD = "standard"
AITKEN = "aitken"


class CoordinatorError(RuntimeError):
    """A subsystem QP could not be solved."""


@dataclass
class MultiplierSet:
    lines: tuple[int, ...]
    lam: np.ndarray
    mu: np.ndarray
    nu: np.ndarray

    def __post_init__(self):
        self.row_of = {l: i for i, l in enumerate(self.lines)}

    @classmethod
    def zeros(cls, lines: Sequence[int], horizon: int) -> "MultiplierSet":
        shape = (len(lines), horizon)
        return cls(tuple(lines), np.zeros(shape), np.zeros(shape), np.zeros(shape))

    @classmethod
    def from_stack(cls, lines, stack: np.ndarray) -> "MultiplierSet":
        return cls(tuple(lines), stack[0].copy(), stack[1].copy(), stack[2].copy())

    def stack(self) -> np.ndarray:
        return np.stack([self.lam, self.mu, self.nu])

    def shifted(self) -> "MultiplierSet":
        """Drop the first step and repeat the last one (receding-horizon warm start)."""
        return MultiplierSet.from_stack(self.lines, _shift(self.stack()))


@dataclass
class InterconnectState:
    lines: tuple[int, ...]
    p_in: np.ndarray
    q_in: np.ndarray
    v_in: np.ndarray
    p_out: np.ndarray
    q_out: np.ndarray
    v_out: np.ndarray

    @classmethod
    def initial(cls, lines: Sequence[int], horizon: int) -> "InterconnectState":
        z = np.zeros((len(lines), horizon))
        one = np.ones((len(lines), horizon))
        return cls(tuple(lines), z, z.copy(), one, z.copy(), z.copy(), one.copy())

    def sided(self, rows, roles):
        """(own, other) previous values per family for the given link rows and roles."""
        ins = (self.p_in[rows], self.q_in[rows], self.v_in[rows])
        outs = (self.p_out[rows], self.q_out[rows], self.v_out[rows])
        is_in = np.array([r == "in" for r in roles]).reshape(-1, 1)
        own = tuple(np.where(is_in, a, b) for a, b in zip(ins, outs))
        other = tuple(np.where(is_in, b, a) for a, b in zip(ins, outs))
        return own, other

    def gaps(self) -> np.ndarray:
        return np.stack([self.p_in - self.p_out, self.q_in - self.q_out, self.v_in - self.v_out])

    def max_gap(self) -> float:
        g = self.gaps()
        return float(np.max(np.abs(g))) if g.size else 0.0

    def shifted(self) -> "InterconnectState":
        arrs = [_shift(a[None])[0] for a in (self.p_in, self.q_in, self.v_in,
                                            self.p_out, self.q_out, self.v_out)]
        return InterconnectState(self.lines, *arrs)


def _shift(stack: np.ndarray) -> np.ndarray:
    if stack.shape[-1] == 0:
        return stack.copy()
    return np.concatenate([stack[..., 1:], stack[..., -1:]], axis=-1)


@dataclass
class CoordinatorConfig:
    gamma_b: float = 2.0
    gamma_c: float = 1.0
    eps: float = 0.01
    max_outer_iters: int = 500
    mode: str = AITKEN
    aitken_guard: float = 1e-12
    aitken_max_ratio: float | None = 0.8
    qp_tol: float = DEFAULT_TOL

    def __post_init__(self):
        if not self.gamma_b > self.gamma_c > 0:
            raise ValueError("need gamma_b > gamma_c > 0")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.mode not in (STANDARD, AITKEN):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class PhiResult:
    state: InterconnectState
    multipliers: MultiplierSet
    dispatch: list[DispatchVars]
    link_values: list[dict]


@dataclass
class SystemSolution:
    dispatch: DispatchVars
    objective: float
    outer_iterations: int
    solve_rounds: int
    converged: bool
    mode: str
    multipliers: MultiplierSet
    state: InterconnectState
    trace: list[tuple[int, float, float, float]] = field(default_factory=list)


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("GRIDRESTORE_THREADS", "1")))
    except ValueError:
        return 1


def _solve_one(sub: Subsystem, prep: PreparedQP, mult, prev, cfg: CoordinatorConfig):
    if sub.links:
        inst = with_interconnect_terms(prep.instance, sub.links, mult, prev, cfg.gamma_b,
                                       cfg.gamma_c)
        sol = prep.solve(inst.P, inst.q, inst.const, tol=cfg.qp_tol)
    else:
        inst = prep.instance
        sol = prep.solve(tol=cfg.qp_tol)
    if not sol.optimal:
        raise CoordinatorError(f"subsystem {sub.index} QP ended with status {sol.status}")
    ix = inst.index
    return extract_dispatch(inst, sol.x), {k: sol.x[ix[k]] for k in ("LP", "LQ", "LV")}


def subsystem_bases(subs: Sequence[Subsystem], delta, window: Window, grid: GridConfig) -> list:
    return [PreparedQP(build_subsystem_base(s, grid, delta, window)) for s in subs]


def phi_step(multipliers: MultiplierSet, prev: InterconnectState, subs: Sequence[Subsystem],
             delta, window: Window, grid: GridConfig, cfg: CoordinatorConfig,
             bases: Sequence | None = None) -> PhiResult:
    """Solve every subsystem against ``multipliers``/``prev`` and apply one multiplier update."""
    if bases is None:
        bases = subsystem_bases(subs, delta, window, grid)
    args = [(s, b, multipliers, prev, cfg) for s, b in zip(subs, bases)]
    workers = min(_workers(), len(subs))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda a: _solve_one(*a), args))
    else:
        results = [_solve_one(*a) for a in args]

    lines = multipliers.lines
    T = window.length
    vals = {k: np.zeros((len(lines), T)) for k in
            ("p_in", "q_in", "v_in", "p_out", "q_out", "v_out")}
    for sub, (_, lv) in zip(subs, results):
        for j, lk in enumerate(sub.links):
            row = multipliers.row_of[lk.line]
            vals[f"p_{lk.role}"][row] = lv["LP"][j]
            vals[f"q_{lk.role}"][row] = lv["LQ"][j]
            vals[f"v_{lk.role}"][row] = lv["LV"][j]
    state = InterconnectState(lines, **vals)
    g = cfg.gamma_c
    new = MultiplierSet(lines,
                        multipliers.lam + g * (state.p_in - state.p_out),
                        multipliers.mu + g * (state.q_in - state.q_out),
                        multipliers.nu + g * (state.v_in - state.v_out))
    return PhiResult(state, new, [r[0] for r in results], [r[1] for r in results])


def aitken_update(lam_k, lam_hat, lam_bar, guard: float = 1e-12, max_ratio: float | None = None):
    """Componentwise Aitken delta-squared step.

    Components whose denominator is below ``guard`` fall back to ``lam_bar``.
    With ``max_ratio`` set, the observed contraction ratio
    (lam_bar - lam_hat) / (lam_hat - lam_k) is clipped to at most that value,
    which bounds the extrapolation on nearly linear drifts.
    """
    lam_k, lam_hat, lam_bar = (np.asarray(a, dtype=float) for a in (lam_k, lam_hat, lam_bar))
    d1 = lam_hat - lam_k
    d2 = lam_bar - lam_hat
    denom = d2 - d1
    safe = np.abs(denom) >= guard
    step = np.divide(d2 ** 2, denom, out=np.zeros_like(denom), where=safe)
    out = np.where(safe, lam_bar - step, lam_bar)
    if max_ratio is not None:
        ratio = np.divide(d2, d1, out=np.zeros_like(d1), where=np.abs(d1) >= guard)
        clip = safe & (np.abs(d1) >= guard) & (ratio > max_ratio)
        # Aitken with ratio r extrapolates lam_bar by r / (1 - r) times the last step.
        out = np.where(clip, lam_bar + max_ratio / (1.0 - max_ratio) * d2, out)
    return out


def check_convergence(prev: MultiplierSet, new: MultiplierSet, eps: float) -> bool:
    a, b = prev.stack(), new.stack()
    if a.shape != b.shape:
        raise ValueError(f"multiplier shapes differ: {a.shape} vs {b.shape}")
    return max_delta(prev, new) <= eps


def max_delta(prev: MultiplierSet, new: MultiplierSet) -> float:
    d = np.abs(new.stack() - prev.stack())
    return float(d.max()) if d.size else 0.0


def assemble(topology: NetworkTopology, subs: Sequence[Subsystem], parts: Sequence[DispatchVars],
             link_values: Sequence[dict], window: Window, s_base: float = 1.0) -> DispatchVars:
    """Network-wide dispatch; cut-line flows are taken from the out side."""
    T = window.length
    nb, nl = topology.n_bus, topology.n_line
    out = DispatchVars(*(np.zeros((nb, T)) for _ in range(5)), np.zeros((nl, T)), np.zeros((nl, T)))
    for sub, dv, lv in zip(subs, parts, link_values):
        for name in ("PL", "QL", "PDG", "QDG", "V"):
            getattr(out, name)[sub.buses] = getattr(dv, name)
        if sub.lines.size:
            out.PT[sub.lines] = dv.PT
            out.QT[sub.lines] = dv.QT
        for j, lk in enumerate(sub.links):
            if lk.role == "out":
                out.PT[lk.line] = lk.sign * s_base * lv["LP"][j]
                out.QT[lk.line] = lk.sign * s_base * lv["LQ"][j]
    return out


def coordinate(topology: NetworkTopology, partition: Partition, delta, window: Window,
               grid: GridConfig, cfg: CoordinatorConfig,
               warm: tuple[MultiplierSet, InterconnectState] | None = None,
               subs: Sequence[Subsystem] | None = None) -> SystemSolution:
    """Drive the subsystem QPs to consensus for one fixed line-availability map."""
    subs = list(subs) if subs is not None else subsystems(partition, topology)
    lines = tuple(lk.line for lk in partition.links)
    T = window.length
    if warm is not None and warm[0].lines == lines and warm[0].lam.shape[1] == T:
        mult, prev = warm
    else:
        mult, prev = MultiplierSet.zeros(lines, T), InterconnectState.initial(lines, T)

    def objective_of(res: PhiResult) -> tuple[DispatchVars, float]:
        dv = assemble(topology, subs, res.dispatch, res.link_values, window, grid.s_base)
        return dv, load_loss_cost(dv, topology, window)

    bases = subsystem_bases(subs, delta, window, grid)
    trace = []
    if not lines:
        res = phi_step(mult, prev, subs, delta, window, grid, cfg, bases)
        dv, obj = objective_of(res)
        trace.append((1, 0.0, 0.0, obj))
        return SystemSolution(dv, obj, 1, 1, True, cfg.mode, res.multipliers, res.state, trace)

    rounds = 0
    last_plain = None
    r_max = cfg.aitken_max_ratio
    factor_cap = None if r_max is None else r_max / (1.0 - r_max)
    best = None
    converged = False
    k = 0
    for k in range(1, cfg.max_outer_iters + 1):
        if cfg.mode == STANDARD:
            res = phi_step(mult, prev, subs, delta, window, grid, cfg, bases)
            rounds += 1
            new = res.multipliers
            delta_max = max_delta(mult, new)
            converged = delta_max <= cfg.eps
        else:
            hat = phi_step(mult, prev, subs, delta, window, grid, cfg, bases)
            res = phi_step(hat.multipliers, hat.state, subs, delta, window, grid, cfg, bases)
            rounds += 2
            r_hat = max_delta(mult, hat.multipliers)
            r_bar = max_delta(hat.multipliers, res.multipliers)
            # Safeguard: if the last extrapolation left a larger fixed-point
            # residual than the plain iterate it replaced, take a plain step.
            # Each trigger also halves the admissible extrapolation factor.
            if last_plain is not None and r_hat > last_plain:
                new = res.multipliers
                factor_cap = None if factor_cap is None else factor_cap / 2
            else:
                ratio = None if factor_cap is None else factor_cap / (1.0 + factor_cap)
                stacked = aitken_update(mult.stack(), hat.multipliers.stack(),
                                        res.multipliers.stack(), cfg.aitken_guard, ratio)
                new = MultiplierSet.from_stack(lines, stacked)
            last_plain = r_bar
            delta_max = max_delta(mult, new)
            # The last plain update must also be small so the consensus gap is bounded.
            converged = delta_max <= cfg.eps and r_bar <= cfg.eps
        gap = res.state.max_gap()
        dv, obj = objective_of(res)
        trace.append((k, delta_max, gap, obj))
        if best is None or gap < best[0]:
            best = (gap, dv, obj, new, res.state)
        mult, prev = new, res.state
        if converged:
            break

    if converged:
        return SystemSolution(dv, obj, k, rounds, True, cfg.mode, mult, prev, trace)
    logger.info("coordinator hit %d outer iterations (gap %.3g)", k, best[0])
    _, dv, obj, m, st = best
    return SystemSolution(dv, obj, k, rounds, False, cfg.mode, m, st, trace)


def write_trace(path, solution: SystemSolution) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "max_multiplier_delta", "max_consensus_gap", "objective"])
        for row in solution.trace:
            w.writerow([row[0], repr(float(row[1])), repr(float(row[2])), repr(float(row[3]))])
