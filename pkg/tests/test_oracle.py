import math

import numpy as np
import pytest

from gridrestore.ga import (GAConfig, centralized_solution, count_route_assignments, encode, fitness,
                            run_ga)
from gridrestore.oracle import (EnumerationRefused, count_assignments, enumerate_integer_assignments,
                                exact_plan)

from conftest import desk_problem


def recursive_count(damages, crews):
    """Ordered splits of ``damages`` over ``crews`` sequences, counted one damage at a time."""
    def place(left, routes):
        if not left:
            return 1
        d, rest = left[0], left[1:]
        total = 0
        for i, r in enumerate(routes):
            for pos in range(len(r) + 1):
                total += place(rest, routes[:i] + [r[:pos] + [d] + r[pos:]] + routes[i + 1:])
        return total
    return place(list(damages), [[] for _ in range(crews)])


def test_four_damages_one_crew():
    got = list(enumerate_integer_assignments(["a", "b", "c", "d"], 1, 0, 1))
    assert len(got) == 24
    assert len({r for r, _ in got}) == 24


def test_switch_bits_only():
    got = list(enumerate_integer_assignments([], 1, 1, 2))
    assert len(got) == 4
    assert len({b.tobytes() for _, b in got}) == 4
    assert all(r == ((),) for r, _ in got)


@pytest.mark.parametrize("n,z", [(3, 2), (2, 3), (4, 2), (3, 3)])
def test_route_count_matches_recursive_enumerator(n, z):
    pending = [f"D{i}" for i in range(n)]
    routes = [r for r, _ in enumerate_integer_assignments(pending, z, 0, 1)]
    assert len(routes) == len(set(routes)) == recursive_count(pending, z)
    assert len(routes) == count_route_assignments(n, z)


def test_three_damages_two_crews_formula():
    n = 3
    formula = sum(math.comb(n, k) * math.factorial(k) * math.factorial(n - k) for k in range(n + 1))
    assert formula == count_route_assignments(3, 2) == recursive_count("abc", 2)


def test_cap_refusal():
    assert count_assignments(5, 2, 2, 4) > 10 ** 5
    with pytest.raises(EnumerationRefused):
        enumerate_integer_assignments([f"D{i}" for i in range(5)], 2, 2, 4, cap=10 ** 5)


def test_no_damages_no_switches_is_dispatch_cost():
    p = desk_problem(0, n_damage=0, n_crew=1, n_switch=0, horizon=2)
    res = exact_plan(p)
    assert res.evaluated == 1
    delta = np.ones((p.topology.n_line, p.window.length))
    cost, _ = centralized_solution(p, delta)
    assert res.cost == pytest.approx(cost, rel=1e-9)


def test_oracle_dominates_ga_and_every_assignment():
    p = desk_problem(4, n_damage=2, n_crew=1, n_switch=1, horizon=3)
    res = exact_plan(p)
    assert res.evaluated == 2 * 2 ** 3
    for routes, bits in enumerate_integer_assignments(p.pending, 1, 1, 3):
        assert res.cost <= fitness(encode(routes, bits), p, centralized=True) + 1e-9
    ga = run_ga(p, GAConfig(parents=2, offspring=5, generations=5, seed=0))
    assert res.cost <= fitness(ga.best, p, centralized=True) + 1e-9
    # The distributed evaluation is within coordinator tolerance of the oracle.
    assert ga.fitness.cost >= res.cost * (1 - 0.03) - 1e-6
