import numpy as np
import pytest

from gridrestore.dmpc import (AITKEN, STANDARD, CoordinatorConfig, InterconnectState, MultiplierSet,
                              aitken_update, check_convergence, coordinate, phi_step,
                              subsystem_bases, write_trace)
from gridrestore.netmodel import GridConfig, Window, build_system_qp
from gridrestore.partition import from_assignment, partition_network, subsystems
from gridrestore.qpsolve import solve_qp
from gridrestore.synth import random_feeder

from conftest import chain


def centralized(topo, grid, delta, window):
    return solve_qp(build_system_qp(topo, grid, delta, window)).objective


def test_config_validation():
    with pytest.raises(ValueError):
        CoordinatorConfig(gamma_b=1.0, gamma_c=1.0)
    with pytest.raises(ValueError):
        CoordinatorConfig(eps=0.0)
    with pytest.raises(ValueError):
        CoordinatorConfig(mode="newton")


def test_multiplier_update_is_gamma_times_gap():
    # lam=1, gamma_c=0.5, P_in=2, P_out=1 -> 1.5
    lam, g = np.array([[1.0]]), 0.5
    state = InterconnectState((0,), np.array([[2.0]]), np.zeros((1, 1)), np.zeros((1, 1)),
                              np.array([[1.0]]), np.zeros((1, 1)), np.zeros((1, 1)))
    assert np.allclose(lam + g * (state.p_in - state.p_out), 1.5)
    assert state.max_gap() == pytest.approx(1.0)


def test_phi_step_applies_the_update_rule(grid1):
    topo, part = two_bus()
    subs = subsystems(part, topo)
    w, delta = Window(0, 1), np.ones((1, 1))
    cfg = CoordinatorConfig(gamma_c=0.5)
    lines = tuple(lk.line for lk in part.links)
    mult = MultiplierSet(lines, np.ones((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)))
    res = phi_step(mult, InterconnectState.initial(lines, 1), subs, delta, w, grid1, cfg)
    st = res.state
    assert np.allclose(res.multipliers.lam, 1.0 + 0.5 * (st.p_in - st.p_out))
    assert np.allclose(res.multipliers.nu, 0.5 * (st.v_in - st.v_out))


def test_aitken_examples():
    assert aitken_update(3.0, 3.0, 3.0) == pytest.approx(3.0)
    # phi(x) = 0.5x + 1 from x0 = 0: hat = 1, bar = 1.5, exact fixed point 2.
    assert aitken_update(0.0, 1.0, 1.5) == pytest.approx(2.0)
    assert aitken_update(0.0, 1.0, 1.5, max_ratio=0.8) == pytest.approx(2.0)
    # Zero denominator falls back to bar.
    assert aitken_update(0.0, 1.0, 2.0, guard=1e-12) == pytest.approx(2.0)


def test_aitken_componentwise():
    k = np.array([0.0, 5.0, 0.0])
    hat = np.array([1.0, 5.0, 1.0])
    bar = np.array([1.5, 5.0, 2.0])
    assert np.allclose(aitken_update(k, hat, bar), [2.0, 5.0, 2.0])


def test_aitken_exact_on_random_affine_maps():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a, b, x0 = rng.uniform(-0.75, 0.75), rng.normal(), rng.normal()
        hat = a * x0 + b
        bar = a * hat + b
        assert aitken_update(x0, hat, bar, max_ratio=0.8) == pytest.approx(b / (1 - a))


def test_check_convergence():
    m = MultiplierSet.zeros((0, 3), 2)
    assert check_convergence(m, m, 0.01)
    other = MultiplierSet.zeros((0, 3), 2)
    other.mu[1, 0] = 0.02
    assert not check_convergence(m, other, 0.01)
    with pytest.raises(ValueError):
        check_convergence(m, MultiplierSet.zeros((0,), 2), 0.01)


def two_bus():
    topo = chain([40.0], dg0=100.0)
    part = from_assignment(topo, {"0": 0, "1": 1})
    return topo, part


def test_phi_step_fixed_point_and_consensus(grid1):
    topo, part = two_bus()
    subs = subsystems(part, topo)
    w, delta = Window(0, 1), np.ones((1, 1))
    cfg = CoordinatorConfig()
    lines = tuple(lk.line for lk in part.links)
    bases = subsystem_bases(subs, delta, w, grid1)
    mult, prev = MultiplierSet.zeros(lines, 1), InterconnectState.initial(lines, 1)
    for _ in range(100):
        res = phi_step(mult, prev, subs, delta, w, grid1, cfg, bases)
        mult, prev = res.multipliers, res.state
    assert abs(prev.p_in - prev.p_out).max() < 1e-4
    # At consensus the update leaves the multipliers unchanged.
    again = phi_step(mult, prev, subs, delta, w, grid1, cfg, bases)
    assert np.abs(again.multipliers.stack() - mult.stack()).max() < 1e-3
    # The agreed flow is the centralized one: 40 kW of load on bus 1.
    assert grid1.s_base * prev.p_out[0, 0] == pytest.approx(40.0, abs=0.05)


def test_single_subsystem_matches_centralized():
    topo, grid = random_feeder(10, 3, horizon=2)
    w, delta = Window(0, 2), np.ones((topo.n_line, 2))
    part = partition_network(topo, 1, 0)
    sol = coordinate(topo, part, delta, w, grid, CoordinatorConfig())
    assert sol.converged and sol.outer_iterations == 1
    assert sol.objective == pytest.approx(centralized(topo, grid, delta, w), rel=1e-6)


@pytest.mark.parametrize("n_bus,n_s,seed", [(10, 2, 1), (16, 4, 3)])
def test_modes_agree_with_centralized(n_bus, n_s, seed):
    topo, grid = random_feeder(n_bus, seed, horizon=2)
    w, delta = Window(0, 2), np.ones((topo.n_line, 2))
    part = partition_network(topo, n_s, seed)
    cen = centralized(topo, grid, delta, w)
    out = {}
    for mode in (STANDARD, AITKEN):
        cfg = CoordinatorConfig(mode=mode)
        sol = coordinate(topo, part, delta, w, grid, cfg)
        assert sol.converged and sol.mode == mode
        assert sol.state.max_gap() <= cfg.eps / cfg.gamma_c + 1e-12
        out[mode] = sol.objective
    assert out[STANDARD] == pytest.approx(cen, rel=0.03)
    assert out[AITKEN] == pytest.approx(cen, rel=0.03)
    assert out[AITKEN] == pytest.approx(out[STANDARD], rel=0.03)


def test_warm_start_from_converged_multipliers_is_quick():
    topo, grid = random_feeder(8, 0, horizon=2)
    w, delta = Window(0, 2), np.ones((topo.n_line, 2))
    part = partition_network(topo, 2, 0)
    cold = coordinate(topo, part, delta, w, grid, CoordinatorConfig(mode=STANDARD))
    warm = coordinate(topo, part, delta, w, grid, CoordinatorConfig(mode=STANDARD),
                      warm=(cold.multipliers, cold.state))
    assert warm.converged and warm.solve_rounds < cold.solve_rounds


def test_determinism_and_trace(tmp_path):
    topo, grid = random_feeder(8, 2, horizon=2)
    w, delta = Window(0, 2), np.ones((topo.n_line, 2))
    part = partition_network(topo, 2, 2)
    a = coordinate(topo, part, delta, w, grid, CoordinatorConfig())
    b = coordinate(topo, part, delta, w, grid, CoordinatorConfig())
    assert np.array_equal(a.multipliers.stack(), b.multipliers.stack())
    assert a.trace == b.trace
    write_trace(tmp_path / "t.csv", a)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0].startswith("iteration") and len(lines) == len(a.trace) + 1


def test_iteration_cap_returns_flagged_best():
    topo, grid = random_feeder(8, 1, horizon=2)
    w, delta = Window(0, 2), np.ones((topo.n_line, 2))
    part = partition_network(topo, 2, 1)
    sol = coordinate(topo, part, delta, w, grid, CoordinatorConfig(mode=STANDARD, max_outer_iters=3))
    assert not sol.converged and sol.outer_iterations == 3
    assert np.isfinite(sol.objective)


def test_open_link_gives_zero_cut_flow():
    topo, grid = random_feeder(10, 4, horizon=1)
    part = partition_network(topo, 2, 4)
    w = Window(0, 1)
    delta = np.ones((topo.n_line, 1))
    for lk in part.links:
        delta[lk.line] = 0
    sol = coordinate(topo, part, delta, w, grid, CoordinatorConfig())
    for lk in part.links:
        assert abs(sol.dispatch.PT[lk.line]).max() < 1e-4
    assert sol.objective == pytest.approx(centralized(topo, grid, delta, w), rel=0.03, abs=1e-6)
