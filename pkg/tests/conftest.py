import numpy as np
import pytest

from gridrestore.netmodel import Bus, GridConfig, Line, NetworkTopology


def make_bus(id, cost=0.0, p=0.0, q=None, dg=0.0, dgq=None, x=None, y=None):
    q = 0.5 * p if q is None else q
    dgq = dg if dgq is None else dgq
    return Bus(str(id), cost=[cost], p_max=[p], q_max=[q], dg_p_max=[dg], dg_q_max=[dgq], x=x, y=y)


def chain(loads, dg0, r=0.01, plim=1000.0, costs=None, switch=()):
    """Radial chain 0-1-..-n with a DG at bus 0."""
    costs = costs if costs is not None else [0.1] * len(loads)
    buses = [make_bus(0, dg=dg0, x=0.0, y=0.0)]
    for i, (p, c) in enumerate(zip(loads, costs), start=1):
        buses.append(make_bus(i, cost=c, p=p, x=float(i), y=0.0))
    lines = [Line(str(i), str(i + 1), r, 2 * r, plim, plim, switch=i in switch)
             for i in range(len(loads))]
    return NetworkTopology(buses, lines)


@pytest.fixture
def grid1():
    return GridConfig(horizon=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def desk_problem(seed=0, **kw):
    """Planning problem of the first step of a desk-sized synthetic scenario."""
    from gridrestore import sim, synth
    from gridrestore.partition import subsystems
    sc = sim.scenario_from_dict(synth.desk_scenario(seed, **kw))
    cfg = sim.SimConfig()
    part = sim._partition(sc, cfg)
    st = sim.apply_events(sim._initial_state(sc), sc, 0.0)
    return sim.planning_problem(sc, st, part, subsystems(part, sc.topology), cfg)
