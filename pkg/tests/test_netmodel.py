import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridrestore import synth
from gridrestore.dmpc import InterconnectState, MultiplierSet
from gridrestore.netmodel import (DispatchVars, GridConfig, Line, NetworkTopology, Window,
                                  balance_residuals, big_m, build_subsystem_qp, build_system_qp,
                                  drop_coefficient, extract_dispatch, load_loss_cost, load_network,
                                  network_from_dict, network_to_dict, validate_network,
                                  voltage_residuals)
from gridrestore.partition import from_assignment, partition_network, subsystems
from gridrestore.qpsolve import kkt_residuals, solve_qp

from conftest import chain, make_bus

W1 = Window(0, 1)


def solve(topo, cfg, delta, window=W1):
    inst = build_system_qp(topo, cfg, delta, window)
    sol = solve_qp(inst)
    assert sol.optimal
    return sol, extract_dispatch(inst, sol.x)


def test_single_bus_valid(grid1):
    assert validate_network(NetworkTopology([make_bus(0)], []), grid1) == []


def test_zero_flow_limit_reported(grid1):
    topo = NetworkTopology([make_bus(0), make_bus(1)], [Line("0", "1", 0.1, 0.2, 0.0, 10.0)])
    assert any("nonpositive flow limit" in f for f in validate_network(topo, grid1))


def test_other_findings(grid1):
    topo = NetworkTopology([make_bus(0), make_bus(0), make_bus(2, p=-1)],
                           [Line("0", "9", 0.1, 0.2, 1, 1)])
    found = " | ".join(validate_network(topo, GridConfig(eps=2.0)))
    for text in ("duplicate bus id", "negative p_max", "unknown bus", "eps must lie"):
        assert text in found


def test_feeder123_file_valid():
    topo, cfg = load_network(synth.DATA_DIR / "feeder123.json")
    assert validate_network(topo, cfg) == []
    assert (topo.n_bus, len(topo.switched)) == (123, 5)
    # Independent walk over the raw document.
    doc = network_to_dict(topo, cfg)
    ids = {b["id"] for b in doc["buses"]}
    assert len(ids) == 123
    assert all(ln["from"] in ids and ln["to"] in ids and ln["p_lim"] > 0 for ln in doc["lines"])


def test_json_round_trip():
    topo, cfg = synth.random_feeder(6, 3, n_switch=1)
    again, cfg2 = network_from_dict(network_to_dict(topo, cfg))
    assert network_to_dict(again, cfg2) == network_to_dict(topo, cfg)


def test_load_loss_cost_examples():
    topo = chain([100.0], dg0=0.0)
    w = Window(0, 2)
    full = DispatchVars(PL=np.array([[0.0, 0.0], [100.0, 100.0]]), QL=np.zeros((2, 2)),
                        PDG=np.zeros((2, 2)), QDG=np.zeros((2, 2)), V=np.ones((2, 2)),
                        PT=np.zeros((1, 2)), QT=np.zeros((1, 2)))
    topo.buses[1].cost = [0.1]
    assert load_loss_cost(full, topo, w) == 0.0
    single = NetworkTopology([make_bus(0, cost=1.0, p=100.0)], [])
    part = DispatchVars(PL=np.array([[60.0, 60.0]]), QL=np.zeros((1, 2)), PDG=np.zeros((1, 2)),
                        QDG=np.zeros((1, 2)), V=np.ones((1, 2)), PT=np.zeros((0, 2)),
                        QT=np.zeros((0, 2)))
    assert load_loss_cost(part, single, w) == pytest.approx(80.0)


def test_zero_demand_optimum_is_zero(grid1):
    topo = chain([0.0, 0.0], dg0=50.0)
    sol, dv = solve(topo, grid1, np.ones((2, 1)))
    assert sol.objective == pytest.approx(0.0, abs=1e-7)
    for k in ("PL", "QL", "PT", "QT"):
        assert np.allclose(getattr(dv, k), 0.0, atol=1e-6)


def test_islanded_load_unserved(grid1):
    topo = chain([30.0], dg0=100.0)
    topo.buses[1].cost = [0.2]
    sol, dv = solve(topo, grid1, np.zeros((1, 1)))
    assert dv.PL[1, 0] == pytest.approx(0.0, abs=1e-6)
    assert sol.objective == pytest.approx(6.0, abs=1e-6)
    sol, dv = solve(topo, grid1, np.ones((1, 1)))
    assert dv.PL[1, 0] == pytest.approx(30.0, abs=1e-5)


def _grid_search(topo, cfg, dg, lim):
    """Brute-force served-load levels (1 kW grid) on a 0-1-2 chain with constant power factor."""
    k = drop_coefficient(cfg)
    r = [ln.r for ln in topo.lines]
    x = [ln.x for ln in topo.lines]
    p1, p2 = topo.buses[1].p_max[0], topo.buses[2].p_max[0]
    c1, c2 = topo.buses[1].cost[0], topo.buses[2].cost[0]
    best = np.inf
    for a, b in itertools.product(range(int(p1) + 1), range(int(p2) + 1)):
        f01, f12 = a + b, b
        if f01 > dg or f01 > lim or f12 > lim:
            continue
        drop = k * (r[0] * f01 + x[0] * 0.5 * f01) + k * (r[1] * f12 + x[1] * 0.5 * f12)
        if drop > 2 * cfg.eps:
            continue
        best = min(best, c1 * (p1 - a) + c2 * (p2 - b))
    return best


def test_three_bus_chain_matches_grid_search(grid1):
    topo = chain([40.0, 50.0], dg0=70.0, plim=60.0, costs=[0.2, 0.1], r=0.5)
    topo.buses[0].dg_q_max = [200.0]
    sol, _ = solve(topo, grid1, np.ones((2, 1)))
    assert sol.objective == pytest.approx(_grid_search(topo, grid1, 70.0, 60.0), abs=1e-5)


def test_subsystem_without_neighbours_equals_system(grid1):
    topo, cfg = synth.random_feeder(6, 1, horizon=1)
    sub, = subsystems(partition_network(topo, 1, 0), topo)
    delta = np.ones((topo.n_line, 1))
    a = build_system_qp(topo, cfg, delta, W1)
    b = build_subsystem_qp(sub, cfg, delta, None, None, 2.0, 1.0, W1)
    for name in ("P", "A", "G"):
        assert (getattr(a, name) != getattr(b, name)).nnz == 0
    for name in ("q", "b", "h", "lb", "ub"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_one_link_adds_three_variables(grid1):
    topo = chain([20.0], dg0=50.0)
    part = from_assignment(topo, {"0": 0, "1": 1})
    subs = subsystems(part, topo)
    lines = [lk.line for lk in part.links]
    mult = MultiplierSet.zeros(lines, 1)
    prev = InterconnectState.initial(lines, 1)
    delta = np.ones((1, 1))
    for s in subs:
        inst = build_subsystem_qp(s, grid1, delta, mult, prev, 2.0, 1.0, W1)
        extra = sum(inst.index[k].size for k in ("LP", "LQ", "LV"))
        assert extra == 3
    with pytest.raises(ValueError):
        build_subsystem_qp(subs[0], grid1, delta, mult, prev, 1.0, 2.0, W1)


def test_big_m_formula():
    topo = chain([10.0, 10.0], dg0=10.0, plim=100.0, r=0.2)
    cfg = GridConfig()
    k = 1000.0 / cfg.v_ref ** 2
    assert big_m(topo, cfg) == pytest.approx(2 * cfg.eps + k * (0.2 * 100 + 0.4 * 100))


@settings(max_examples=12, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 2 ** 16))
def test_dispatch_invariants(seed, mask):
    topo, cfg = synth.random_feeder(7, seed, n_switch=1, horizon=2, ties=1)
    T = 2
    bits = np.array([(mask >> i) & 1 for i in range(topo.n_line * T)], dtype=np.uint8)
    delta = bits.reshape(topo.n_line, T)
    w = Window(0, T)
    inst = build_system_qp(topo, cfg, delta, w)
    # The all-zero dispatch at nominal voltage is always feasible.
    x0 = np.zeros(inst.n)
    x0[inst.index["V"].ravel()] = 1.0
    assert kkt_residuals(inst, x0)[1] <= 1e-9
    sol = solve_qp(inst)
    assert sol.optimal
    dv = extract_dispatch(inst, sol.x)
    assert max(balance_residuals(topo, dv)) <= 1e-6
    open_ = delta == 0
    assert np.all(np.abs(dv.PT[open_]) <= 1e-9) and np.all(np.abs(dv.QT[open_]) <= 1e-9)
    assert voltage_residuals(topo, cfg, dv, delta) <= 1e-6
    assert np.all(dv.V >= 1 - cfg.eps - 1e-9) and np.all(dv.V <= 1 + cfg.eps + 1e-9)
    assert sol.objective == pytest.approx(load_loss_cost(dv, topo, w), abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 100), st.floats(0, 100))
def test_load_loss_monotone(a, b):
    single = NetworkTopology([make_bus(0, cost=0.3, p=100.0)], [])
    def cost(v):
        return load_loss_cost(DispatchVars(np.array([[v]]), *[np.zeros((1, 1))] * 3,
                                           np.ones((1, 1)), np.zeros((0, 1)), np.zeros((0, 1))),
                              single, W1)
    lo, hi = sorted((a, b))
    assert cost(hi) <= cost(lo)
