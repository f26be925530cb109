"""Exhaustive reference planner for desk-sized instances."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .ga import Chromosome, Evaluator, PlanningProblem, count_route_assignments, encode

DEFAULT_CAP = 10 ** 6


class EnumerationRefused(ValueError):
    """The assignment space is larger than the cap."""


def _compositions(n: int, parts: int) -> Iterator[tuple[int, ...]]:
    if parts == 1:
        yield (n,)
        return
    for first in range(n + 1):
        for rest in _compositions(n - first, parts - 1):
            yield (first,) + rest


def count_assignments(n_damages: int, n_crews: int, n_switch: int, horizon: int) -> int:
    return count_route_assignments(n_damages, n_crews) * 2 ** (n_switch * horizon)


def enumerate_integer_assignments(pending: Sequence[str], crews: int, n_switch: int, horizon: int,
                                  cap: int = DEFAULT_CAP
                                  ) -> Iterator[tuple[tuple[tuple[str, ...], ...], np.ndarray]]:
    """Yield every (per-crew routes, switch-bit matrix) pair exactly once."""
    total = count_assignments(len(pending), crews, n_switch, horizon)
    if total > cap:
        raise EnumerationRefused(f"{total} assignments exceed the cap of {cap}")
    return _enumerate(tuple(pending), crews, n_switch, horizon)


def _enumerate(pending, crews, n_switch, horizon):
    nbits = n_switch * horizon
    for perm in itertools.permutations(pending):
        for comp in _compositions(len(perm), crews):
            routes, pos = [], 0
            for c in comp:
                routes.append(tuple(perm[pos:pos + c]))
                pos += c
            for flat in itertools.product((0, 1), repeat=nbits):
                yield tuple(routes), np.array(flat, dtype=np.uint8).reshape(n_switch, horizon)


@dataclass
class OracleResult:
    routes: tuple[tuple[str, ...], ...]
    switch_bits: np.ndarray
    cost: float
    chromosome: Chromosome
    evaluated: int


def exact_plan(problem: PlanningProblem, cap: int = DEFAULT_CAP, rel_tol: float = 1e-9) -> OracleResult:
    """Minimum window cost over all assignments, each solved with the centralized QP.

    Ties (within ``rel_tol``) keep the first assignment in enumeration order.
    """
    ev = Evaluator(problem, centralized=True)
    best = None
    count = 0
    for routes, bits in enumerate_integer_assignments(problem.pending, len(problem.crews),
                                                      problem.n_switch, problem.window.length, cap):
        count += 1
        chrom = encode(routes, bits)
        cost = ev(chrom).cost
        if best is None or cost < best[0] - rel_tol * (1.0 + abs(best[0])):
            best = (cost, routes, bits, chrom)
    if best is None:
        raise EnumerationRefused("nothing to enumerate")
    return OracleResult(best[1], best[2], best[0], best[3], count)
