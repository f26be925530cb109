"""Genetic search over crew routes and switch schedules.

A chromosome is (damage order) # (z-1 crew counts) # (switch bits per step);
its fitness is the load-loss cost of the window, computed by coordinating the
subsystem dispatch problems for the line-availability map it induces.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .dmpc import CoordinatorConfig, InterconnectState, MultiplierSet, coordinate
from .netmodel import GridConfig, NetworkTopology, Window, build_system_qp, extract_dispatch
from .partition import Partition, Subsystem, subsystems
from .qpsolve import solve_qp
from .routing import (ConnectivityMap, Crew, Damage, RouteSchedule, TravelTimeProvider,
                      connectivity, schedule_route, truncate_to_window)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Chromosome:
    damage_order: tuple[str, ...]
    crew_counts: tuple[int, ...]
    switch_bits: tuple[tuple[int, ...], ...]   # switched line x step

    def key(self) -> tuple:
        return (self.damage_order, self.crew_counts, self.switch_bits)

    def bits_array(self) -> np.ndarray:
        if not self.switch_bits:
            return np.zeros((0, 0), dtype=np.uint8)
        return np.array(self.switch_bits, dtype=np.uint8)

    def check(self, n_crews: int, n_switch: int, horizon: int,
              pending: Sequence[str] | None = None) -> None:
        if len(set(self.damage_order)) != len(self.damage_order):
            raise ValueError("damage order repeats a damage")
        if pending is not None and sorted(self.damage_order) != sorted(pending):
            raise ValueError("damage order is not a permutation of the pending damages")
        if len(self.crew_counts) != max(n_crews - 1, 0):
            raise ValueError(f"expected {max(n_crews - 1, 0)} crew genes")
        if any(c < 0 for c in self.crew_counts) or sum(self.crew_counts) > len(self.damage_order):
            raise ValueError("crew counts exceed the number of damages")
        if len(self.switch_bits) != n_switch or any(len(r) != horizon for r in self.switch_bits):
            raise ValueError("switch bits do not match switches x horizon")


def make_chromosome(order, counts, bits) -> Chromosome:
    bits = np.asarray(bits, dtype=np.uint8)
    return Chromosome(tuple(order), tuple(int(c) for c in counts),
                      tuple(tuple(int(v) for v in row) for row in bits))


@dataclass
class GAConfig:
    p_flip: float = 0.3
    p_swap: float = 0.3
    p_slide: float = 0.3
    p_crew_cross: float = 0.3
    p_crew_mut: float = 0.3
    p_switch_cross: float = 0.1
    p_switch_mut: float = 0.1
    parents: int = 4
    offspring: int = 50
    generations: int = 50
    tournament: int = 2
    seed: int = 0

    def __post_init__(self):
        for name in ("p_flip", "p_swap", "p_slide", "p_crew_cross", "p_crew_mut",
                     "p_switch_cross", "p_switch_mut"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if min(self.parents, self.offspring, self.tournament) < 1 or self.generations < 0:
            raise ValueError("GA counts must be positive")

    @property
    def population(self) -> int:
        return self.parents * self.offspring + 1


# ---------------------------------------------------------------- operators

def decode(chromosome: Chromosome, crews: int | Sequence) -> list[tuple[str, ...]]:
    """Per-crew damage sequences; the last crew takes whatever the counts leave."""
    z = crews if isinstance(crews, int) else len(crews)
    if z < 1:
        raise ValueError("need at least one crew")
    counts = chromosome.crew_counts
    if len(counts) != z - 1 or any(c < 0 for c in counts) or sum(counts) > len(chromosome.damage_order):
        raise ValueError("crew counts do not fit the damage order")
    routes, pos = [], 0
    for c in counts:
        routes.append(tuple(chromosome.damage_order[pos:pos + c]))
        pos += c
    routes.append(tuple(chromosome.damage_order[pos:]))
    return routes


def encode(routes: Sequence[Sequence[str]], bits) -> Chromosome:
    order = [d for r in routes for d in r]
    return make_chromosome(order, [len(r) for r in routes[:-1]], bits)


def vary_damage_part(order: Sequence, config: GAConfig, rng: np.random.Generator) -> list:
    out = list(order)
    n = len(out)
    if n < 2:
        return out
    if rng.random() < config.p_flip:
        i, j = sorted(rng.choice(n, size=2, replace=False))
        out[i:j + 1] = out[i:j + 1][::-1]
    if rng.random() < config.p_swap:
        i, j = rng.choice(n, size=2, replace=False)
        out[i], out[j] = out[j], out[i]
    if rng.random() < config.p_slide:
        i, j = rng.choice(n, size=2, replace=False)
        gene = out.pop(int(i))
        out.insert(int(j), gene)
    return out


def clamp_counts(counts: Sequence[int], n_damages: int) -> list[int]:
    left = n_damages
    out = []
    for c in counts:
        c = min(max(int(c), 0), left)
        out.append(c)
        left -= c
    return out


def _one_point(a: list, b: list, rng) -> list:
    k = int(rng.integers(0, len(a))) if a else 0
    return a[:k] + b[k:]


def vary_crew_and_switch_parts(chromosome: Chromosome, config: GAConfig, rng: np.random.Generator,
                               partner: Chromosome | None = None) -> Chromosome:
    n = len(chromosome.damage_order)
    counts = list(chromosome.crew_counts)
    if counts:
        if partner is not None and rng.random() < config.p_crew_cross:
            counts = _one_point(counts, list(partner.crew_counts), rng)
        for i in range(len(counts)):
            if rng.random() < config.p_crew_mut:
                counts[i] = int(rng.integers(0, n + 1))
        counts = clamp_counts(counts, n)

    bits = chromosome.bits_array()
    if bits.size:
        shape = bits.shape
        flat = bits.ravel().tolist()
        if partner is not None and rng.random() < config.p_switch_cross:
            flat = _one_point(flat, partner.bits_array().ravel().tolist(), rng)
        flips = rng.random(len(flat)) < config.p_switch_mut
        flat = [1 - v if f else v for v, f in zip(flat, flips)]
        bits = np.array(flat, dtype=np.uint8).reshape(shape)
    return make_chromosome(chromosome.damage_order, counts, bits)


def vary(parent: Chromosome, partner: Chromosome | None, config: GAConfig,
         rng: np.random.Generator) -> Chromosome:
    order = vary_damage_part(parent.damage_order, config, rng)
    child = Chromosome(tuple(order), parent.crew_counts, parent.switch_bits)
    return vary_crew_and_switch_parts(child, config, rng, partner)


def random_composition(n: int, parts: int, rng: np.random.Generator) -> list[int]:
    """Uniform weak composition of n into ``parts`` nonnegative integers (stars and bars)."""
    if parts == 1:
        return [n]
    bars = sorted(rng.choice(n + parts - 1, size=parts - 1, replace=False).tolist())
    edges = [-1] + bars + [n + parts - 1]
    return [edges[i + 1] - edges[i] - 1 for i in range(parts)]


def random_chromosome(pending: Sequence[str], n_crews: int, n_switch: int, horizon: int,
                      rng: np.random.Generator) -> Chromosome:
    order = [pending[i] for i in rng.permutation(len(pending))]
    counts = random_composition(len(order), n_crews, rng)[:-1]
    bits = (rng.random((n_switch, horizon)) < 0.5).astype(np.uint8)
    return make_chromosome(order, counts, bits)


# ------------------------------------------------------------------ fitness

@dataclass
class PlanningProblem:
    """Everything a fitness evaluation needs for one planning step."""

    topology: NetworkTopology
    grid: GridConfig
    crews: list[Crew]
    damages: dict[str, Damage]          # known and unrepaired, including ongoing ones
    pending: tuple[str, ...]            # damages free for assignment
    travel: TravelTimeProvider
    window: Window
    partition: Partition
    coord: CoordinatorConfig
    warm: tuple[MultiplierSet, InterconnectState] | None = None
    subs: list[Subsystem] | None = None

    def __post_init__(self):
        if self.subs is None:
            self.subs = subsystems(self.partition, self.topology)

    @property
    def t0(self) -> float:
        return self.window.start * self.grid.dt_min

    @property
    def window_end(self) -> float:
        return (self.window.start + self.window.length) * self.grid.dt_min

    @property
    def n_switch(self) -> int:
        return len(self.topology.switched)

    def schedules(self, chromosome: Chromosome) -> list[RouteSchedule]:
        routes = decode(chromosome, self.crews)
        return [schedule_route(c, r, self.travel, self.t0, self.damages)
                for c, r in zip(self.crews, routes)]

    def connectivity(self, chromosome: Chromosome) -> ConnectivityMap:
        scheds = [truncate_to_window(s, self.window_end) for s in self.schedules(chromosome)]
        return connectivity(self.topology, list(self.damages.values()), scheds,
                            chromosome.bits_array(), self.window, self.grid.dt_min)

    def completion_sum(self, chromosome: Chromosome) -> float:
        return sum(r.finish for s in self.schedules(chromosome) for r in s.repairs)

    def random(self, rng) -> Chromosome:
        return random_chromosome(list(self.pending), len(self.crews), self.n_switch,
                                 self.window.length, rng)


@dataclass(order=True)
class Fitness:
    """Window cost, ties broken by the sum of (untruncated) repair completion times."""

    cost: float
    tiebreak: float = 0.0


def centralized_solution(problem: PlanningProblem, delta, window: Window | None = None):
    window = window if window is not None else problem.window
    inst = build_system_qp(problem.topology, problem.grid, delta, window)
    sol = solve_qp(inst, tol=problem.coord.qp_tol)
    if not sol.optimal:
        raise RuntimeError(f"centralized dispatch QP ended with status {sol.status}")
    return sol.objective, extract_dispatch(inst, sol.x)


def _warm_column(warm, k: int):
    if warm is None:
        return None
    ms, st = warm
    cols = slice(k, k + 1)
    return (MultiplierSet(ms.lines, ms.lam[:, cols], ms.mu[:, cols], ms.nu[:, cols]),
            InterconnectState(st.lines, st.p_in[:, cols], st.q_in[:, cols], st.v_in[:, cols],
                              st.p_out[:, cols], st.q_out[:, cols], st.v_out[:, cols]))


WARM_BUDGET = 100     # outer iterations allowed to a warm-started coordination


def coordinate_warm(problem: PlanningProblem, delta, window: Window, warm, config=None):
    """Coordinate from ``warm``, falling back to a cold start.

    A warm start far from the new optimum can creep at the rate of a
    bound-limited consensus gap, so warm runs get WARM_BUDGET outer
    iterations and are redone cold if they do not converge.  Returns the
    solution and the solve rounds spent on a discarded warm attempt.
    """
    p = problem
    cfg = config if config is not None else p.coord
    if warm is not None:
        short = dataclasses.replace(cfg, max_outer_iters=min(cfg.max_outer_iters, WARM_BUDGET))
        sol = coordinate(p.topology, p.partition, delta, window, p.grid, short, warm=warm,
                         subs=p.subs)
        if sol.converged:
            return sol, 0
        wasted = sol.solve_rounds
    else:
        wasted = 0
    return coordinate(p.topology, p.partition, delta, window, p.grid, cfg, subs=p.subs), wasted


class Evaluator:
    """Window fitness, evaluated one step at a time.

    With the integer decisions fixed the dispatch problem has no coupling
    between steps, so the window cost is the sum of single-step costs.  Each
    step is cached by (profile index, availability column); the cache may be
    shared across planning steps of a scenario.
    """

    def __init__(self, problem: PlanningProblem, centralized: bool = False,
                 cache: dict | None = None):
        self.problem = problem
        self.centralized = centralized
        self.cache = cache if cache is not None else {}
        self.solve_rounds = 0
        self.unconverged = 0
        self._last = None       # multipliers of the last converged column, used as warm start

    def _profile_len(self) -> int:
        return max(len(v) for b in self.problem.topology.buses for v in b.profiles().values())

    def column_cost(self, k: int, column: np.ndarray) -> float:
        p = self.problem
        j = min(p.window.start + k, self._profile_len() - 1)
        key = (self.centralized, j, np.packbits(column.astype(bool)).tobytes())
        hit = self.cache.get(key)
        if hit is not None:
            return hit
        win = Window(j, 1)
        col = column.reshape(-1, 1)
        if self.centralized:
            cost, _ = centralized_solution(p, col, win)
        else:
            warm = _warm_column(p.warm, k) if p.warm is not None else self._last
            sol, wasted = coordinate_warm(p, col, win, warm)
            self.solve_rounds += wasted
            self.solve_rounds += sol.solve_rounds
            self.unconverged += not sol.converged
            if sol.converged:
                self._last = (sol.multipliers, sol.state)
            cost = sol.objective
        self.cache[key] = cost
        return cost

    def delta_cost(self, delta: np.ndarray) -> float:
        return float(sum(self.column_cost(k, delta[:, k]) for k in range(delta.shape[1])))

    def __call__(self, chromosome: Chromosome) -> Fitness:
        cmap = self.problem.connectivity(chromosome)
        return Fitness(self.delta_cost(cmap.delta), self.problem.completion_sum(chromosome))


def fitness(chromosome: Chromosome, problem: PlanningProblem, centralized: bool = False) -> float:
    """Load-loss cost of the window for one chromosome (no penalty terms)."""
    return Evaluator(problem, centralized)(chromosome).cost


# ------------------------------------------------------------------ search

def _tournament(scores: Sequence[Fitness], size: int, rng) -> int:
    picks = rng.choice(len(scores), size=min(size, len(scores)), replace=False)
    return int(min(picks, key=lambda i: (scores[i], i)))


def evolve(population: Sequence[Chromosome], config: GAConfig,
           fitness_fn: Callable[[Chromosome], Fitness], rng: np.random.Generator,
           scores: Sequence[Fitness] | None = None) -> list[Chromosome]:
    """One generation: tournament parents, their offspring, and the best chromosome so far.

    The population is expected to contain the previous elite, so keeping its
    best member preserves the all-time best.
    """
    if not population:
        raise ValueError("population is empty")
    if scores is None:
        scores = [fitness_fn(c) for c in population]
    elite = population[min(range(len(population)), key=lambda i: (scores[i], i))]
    parents = [population[_tournament(scores, config.tournament, rng)]
               for _ in range(config.parents)]
    nxt = []
    for i, parent in enumerate(parents):
        for _ in range(config.offspring):
            others = [p for j, p in enumerate(parents) if j != i] or [parent]
            partner = others[int(rng.integers(0, len(others)))]
            nxt.append(vary(parent, partner, config, rng))
    nxt.append(elite)
    return nxt


@dataclass
class GAResult:
    best: Chromosome
    fitness: Fitness
    trace: list[tuple[int, float, float]] = field(default_factory=list)
    evaluations: int = 0
    solve_rounds: int = 0
    unconverged: int = 0


def run_ga(problem: PlanningProblem, config: GAConfig, seeds: Sequence[Chromosome] = (),
           evaluator: Evaluator | None = None, rng: np.random.Generator | None = None) -> GAResult:
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    evaluator = evaluator if evaluator is not None else Evaluator(problem)
    pop = list(seeds)[:config.population]
    while len(pop) < config.population:
        pop.append(problem.random(rng))

    trace = []
    memo: dict[tuple, Fitness] = {}

    def score(c: Chromosome) -> Fitness:
        k = c.key()
        if k not in memo:
            memo[k] = evaluator(c)
        return memo[k]

    best_c, best_f = None, None
    for gen in range(config.generations + 1):
        scores = [score(c) for c in pop]
        i = min(range(len(pop)), key=lambda j: (scores[j], j))
        if best_f is None or scores[i] < best_f:
            best_c, best_f = pop[i], scores[i]
        costs = [s.cost for s in scores]
        trace.append((gen, best_f.cost, float(np.mean(costs))))
        if gen == config.generations:
            break
        pop = evolve(pop, config, score, rng, scores)

    return GAResult(best_c, best_f, trace, len(memo), evaluator.solve_rounds,
                    evaluator.unconverged)


def write_trace(path, traces: Mapping[int, Sequence[tuple[int, float, float]]]) -> None:
    """GA trace per planning step: step, generation, best, mean."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "generation", "best_fitness", "mean_fitness"])
        for step in sorted(traces):
            for gen, best, mean in traces[step]:
                w.writerow([step, gen, repr(float(best)), repr(float(mean))])


def heuristic_seed(problem: PlanningProblem) -> Chromosome:
    """Nearest-first greedy routes with every switch closed."""
    crews = problem.crews
    left = list(problem.pending)
    routes: list[list[str]] = [[] for _ in crews]
    free_at = []
    pos = []
    for c in crews:
        if c.ongoing_damage is not None:
            free_at.append(max(problem.t0, c.busy_until))
            pos.append(c.ongoing_damage)
        else:
            free_at.append(problem.t0)
            pos.append(c.position if not c.in_transit else c.heading)
    while left:
        k = min(range(len(crews)), key=lambda i: (free_at[i], i))
        best = min(left, key=lambda d: (problem.travel.travel(pos[k], d, free_at[k], crews[k].id), d))
        arrive = free_at[k] + problem.travel.travel(pos[k], best, free_at[k], crews[k].id)
        free_at[k] = arrive + problem.damages[best].duration(crews[k].id)
        pos[k] = best
        routes[k].append(best)
        left.remove(best)
    bits = np.ones((problem.n_switch, problem.window.length), dtype=np.uint8)
    return encode(routes, bits)


def count_route_assignments(n_damages: int, n_crews: int) -> int:
    return math.factorial(n_damages) * math.comb(n_damages + n_crews - 1, n_crews - 1)
