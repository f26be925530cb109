"""Synthetic networks and scenarios.

The 123-bus feeder keeps the IEEE 123-bus line list (bus numbering, switches,
tie line) with invented impedances, loads, costs, DGs and coordinates, since
the restoration data used for the original study is not public.
"""
from __future__ import annotations

import json
from pathlib import Path

import networkx as nx
import numpy as np

from .netmodel import Bus, GridConfig, Line, NetworkTopology, network_to_dict

DATA_DIR = Path(__file__).parent / "data"

_IEEE123_LINES = """
1-2 1-3 1-7 3-4 3-5 5-6 7-8 8-12 8-9 8-13 9-14 13-34 13-18 14-11 14-10 15-16 15-17
18-19 18-21 19-20 21-22 21-23 23-24 23-25 25-26 25-28 26-27 26-31 27-33 28-29 29-30
30-250 31-32 34-15 35-36 35-40 36-37 36-38 38-39 40-41 40-42 42-43 42-44 44-45 44-47
45-46 47-48 47-49 49-50 50-51 51-151 52-53 53-54 54-55 54-57 55-56 57-58 57-60 58-59
60-61 60-62 62-63 63-64 64-65 65-66 67-68 67-72 67-97 68-69 69-70 70-71 72-73 72-76
73-74 74-75 76-77 76-86 77-78 78-79 78-80 80-81 81-82 81-84 82-83 84-85 86-87 87-88
87-89 89-90 89-91 91-92 91-93 93-94 93-95 95-96 97-98 97-101 98-99 99-100 100-450
101-102 101-105 102-103 103-104 105-106 105-108 106-107 108-109 108-300 109-110
110-111 110-112 112-113 113-114 135-35 149-1 152-52 160-67 197-101
"""
# Normally-closed sectionalizing switches plus the normally-open tie 54-94.
_IEEE123_SWITCHES = [("13", "152"), ("18", "135"), ("60", "160"), ("97", "197"), ("54", "94")]
_SUBSTATION = "149"


def _pairs(text):
    return [tuple(tok.split("-")) for tok in text.split()]


def feeder123(seed: int = 123) -> tuple[NetworkTopology, GridConfig]:
    """Deterministic 123-bus feeder (substation at bus 149, four DGs, five switches)."""
    rng = np.random.default_rng(seed)
    pairs = _pairs(_IEEE123_LINES)
    ids = sorted({b for p in pairs for b in p} | {b for p in _IEEE123_SWITCHES for b in p},
                 key=int)
    g = nx.Graph()
    g.add_nodes_from(ids)
    g.add_edges_from(pairs)
    g.add_edges_from(_IEEE123_SWITCHES)
    pos = nx.spring_layout(g, seed=seed, iterations=200)
    # Spread the layout over roughly 10 km x 10 km.
    coords = {b: (round(5.0 * (pos[b][0] + 1.0), 3), round(5.0 * (pos[b][1] + 1.0), 3))
              for b in ids}

    dg = {"35": (200.0, 150.0), "67": (250.0, 180.0), "97": (200.0, 150.0), "300": (250.0, 180.0)}
    buses = []
    for b in ids:
        if b == _SUBSTATION:
            buses.append(Bus(b, cost=[0.0], p_max=[0.0], q_max=[0.0], dg_p_max=[5000.0],
                             dg_q_max=[4000.0], x=coords[b][0], y=coords[b][1]))
            continue
        loaded = rng.random() < 0.6
        p = float(rng.choice([20.0, 40.0, 75.0])) if loaded else 0.0
        cost = float(rng.choice([0.05, 0.1, 0.2])) if loaded else 0.0
        dp, dq = dg.get(b, (0.0, 0.0))
        buses.append(Bus(b, cost=[cost], p_max=[p], q_max=[0.5 * p], dg_p_max=[dp],
                         dg_q_max=[dq], x=coords[b][0], y=coords[b][1]))
    lines = []
    for a, b in pairs + _IEEE123_SWITCHES:
        r = round(float(rng.uniform(0.005, 0.03)), 4)
        lines.append(Line(a, b, r, round(2 * r, 4), 6000.0, 4000.0,
                          switch=(a, b) in _IEEE123_SWITCHES))
    return NetworkTopology(buses, lines), GridConfig()


def random_feeder(n_bus: int, seed: int, n_dg: int = 2, n_switch: int = 0,
                  horizon: int = 3, ties: int = 0) -> tuple[NetworkTopology, GridConfig]:
    """Small random radial feeder rooted at a capacity-limited source bus "0".

    The source cannot cover all demand, so cost trade-offs across the cut
    lines of a partition are non-trivial.
    """
    rng = np.random.default_rng(seed)
    parent = [None] + [int(rng.integers(max(0, i - 3), i)) for i in range(1, n_bus)]
    total = 0.0
    buses = []
    for i in range(n_bus):
        p = 0.0 if i == 0 else float(rng.choice([20.0, 40.0, 60.0]))
        total += p
        buses.append(Bus(str(i), cost=[float(rng.choice([0.1, 0.2, 0.3])) if p else 0.0],
                         p_max=[p], q_max=[0.5 * p], x=float(i % 4), y=float(i // 4)))
    dg_buses = [0] + sorted(rng.choice(np.arange(1, n_bus), size=min(n_dg, n_bus - 1),
                                       replace=False).tolist())
    for k, i in enumerate(dg_buses):
        cap = 0.45 * total if k == 0 else round(float(rng.uniform(0.1, 0.2)) * total, 1)
        buses[i].dg_p_max = [round(cap, 1)]
        buses[i].dg_q_max = [round(0.8 * cap, 1)]
    lines = []
    for i in range(1, n_bus):
        r = round(float(rng.uniform(0.05, 0.2)), 3)
        lines.append(Line(str(parent[i]), str(i), r, round(2 * r, 3), 0.6 * total, 0.4 * total))
    existing = {frozenset((ln.from_bus, ln.to_bus)) for ln in lines}
    for _ in range(ties):
        for _ in range(50):
            a, b = sorted(rng.choice(n_bus, size=2, replace=False).tolist())
            if frozenset((str(a), str(b))) not in existing:
                existing.add(frozenset((str(a), str(b))))
                lines.append(Line(str(a), str(b), 0.1, 0.2, 0.6 * total, 0.4 * total))
                break
    switched = rng.choice(len(lines), size=min(n_switch, len(lines)), replace=False)
    for l in switched:
        lines[int(l)].switch = True
    return NetworkTopology(buses, lines), GridConfig(horizon=horizon)


def write_feeder123(path=None) -> Path:
    topo, cfg = feeder123()
    path = Path(path) if path is not None else DATA_DIR / "feeder123.json"
    path.write_text(json.dumps(network_to_dict(topo, cfg), indent=1))
    return path


# ---------------------------------------------------------------- scenarios

_REPAIR_MIN = [6.0, 9.0, 10.0, 12.0, 15.0, 18.0]

# (damages, crews, repair-duration changes, travel-time changes, new damages),
# the event mix of the five reference cases with fewer damages and crews.
EVENT_CASES = [(6, 3, 1, 1, 1), (6, 3, 3, 2, 0), (5, 2, 2, 3, 1), (4, 2, 1, 2, 0), (4, 2, 0, 2, 1)]


def _spread(topo: NetworkTopology, km: float) -> None:
    for b in topo.buses:
        b.x, b.y = round(b.x * km, 3), round(b.y * km, 3)


def _damage_lines(topo: NetworkTopology, n: int, rng) -> list[tuple[str, str]]:
    free = [i for i, ln in enumerate(topo.lines) if not ln.switch]
    pick = sorted(rng.choice(len(free), size=n, replace=False).tolist())
    return [(topo.lines[free[i]].from_bus, topo.lines[free[i]].to_bus) for i in pick]


def desk_scenario(seed: int, n_damage: int = 4, n_crew: int = 2, n_switch: int = 1,
                  horizon: int = 4, n_bus: int = 8) -> dict:
    """Event-free instance small enough for exhaustive enumeration."""
    rng = np.random.default_rng([seed, 1])
    topo, cfg = random_feeder(n_bus, seed, n_switch=n_switch, horizon=horizon)
    _spread(topo, 1.5)
    lines = _damage_lines(topo, n_damage, rng)
    damages = [{"id": f"D{k + 1}", "from": a, "to": b, "repair_min": float(rng.choice(_REPAIR_MIN))}
               for k, (a, b) in enumerate(lines)]
    crews = [{"id": f"C{k + 1}", "depot": f"depot{k + 1}", "x": float(rng.uniform(0, 4.5)),
              "y": float(rng.uniform(0, 3.0))} for k in range(n_crew)]
    return {"name": f"desk-{seed}", "network": network_to_dict(topo, cfg), "damages": damages,
            "crews": crews, "events": [], "seed": seed}


def event_scenario(case: int, seed: int, n_bus: int = 14, horizon: int = 3) -> dict:
    """Event-laden scenario following reference case ``case`` (0-4) of EVENT_CASES."""
    n_dmg, n_crew, n_rep, n_trav, n_new = EVENT_CASES[case]
    rng = np.random.default_rng([seed, case, 2])
    topo, cfg = random_feeder(n_bus, seed, n_dg=3, n_switch=2, horizon=horizon, ties=1)
    _spread(topo, 2.0)
    lines = _damage_lines(topo, n_dmg + n_new, rng)
    damages = [{"id": f"D{k + 1}", "from": a, "to": b, "repair_min": float(rng.choice(_REPAIR_MIN))}
               for k, (a, b) in enumerate(lines)]
    initial, late = damages[:n_dmg], damages[n_dmg:]
    n_depot = 1 if n_crew < 3 else 2
    depots = [(float(rng.uniform(0, 6)), float(rng.uniform(0, 6))) for _ in range(n_depot)]
    crews = [{"id": f"C{k + 1}", "depot": f"depot{k % n_depot + 1}",
              "x": depots[k % n_depot][0], "y": depots[k % n_depot][1]} for k in range(n_crew)]
    events = []
    for d in rng.choice(n_dmg, size=n_rep, replace=False).tolist():
        old = initial[d]["repair_min"]
        new = float(rng.choice([v for v in _REPAIR_MIN if v != old]))
        events.append({"kind": "repair_duration_change", "time": float(rng.integers(1, 3) * 5),
                       "damage": initial[d]["id"], "repair_min": new})
    for d in rng.choice(n_dmg, size=n_trav, replace=True).tolist():
        start = float(rng.integers(1, 5) * 5)
        events.append({"kind": "travel_time_change", "time": start, "to": initial[d]["id"],
                       "minutes": 1000.0, "until": start + float(rng.integers(2, 5) * 5)})
    for d in late:
        events.append({"kind": "new_damage", "time": float(rng.integers(2, 8) * 5), "damage": d})
    events.sort(key=lambda e: (e["time"], e["kind"]))
    return {"name": f"case{case + 1}-{seed}", "network": network_to_dict(topo, cfg),
            "damages": initial, "crews": crews, "events": events, "seed": seed}


_CASE1_REPAIR = [15, 10, 18, 9, 9, 12, 9, 6, 6, 10, 12, 9, 9, 6, 15, 12, 6, 12]


def case1_scenario(network: str = "feeder123.json") -> dict:
    """18 damages, 5 crews at 3 depots on the 123-bus feeder, with one event of each kind.

    Repair times are the reference case values; damage sites and depots are synthetic.
    """
    topo, cfg = feeder123()
    rng = np.random.default_rng(2024)
    lines = _damage_lines(topo, 19, rng)
    damages = [{"id": f"D{k + 1}", "from": a, "to": b, "repair_min": float(m)}
               for k, ((a, b), m) in enumerate(zip(lines, _CASE1_REPAIR + [12]))]
    depots = [(1.5, 1.5), (8.5, 2.0), (5.0, 8.5)]
    crews = [{"id": f"C{k + 1}", "depot": f"depot{k % 3 + 1}", "x": depots[k % 3][0],
              "y": depots[k % 3][1]} for k in range(5)]
    events = [
        {"kind": "repair_duration_change", "time": 10.0, "damage": "D18", "repair_min": 6.0},
        {"kind": "travel_time_change", "time": 35.0, "to": "D10", "minutes": 1000.0, "until": 45.0},
        {"kind": "new_damage", "time": 45.0, "damage": damages[18]},
    ]
    return {"name": "case1", "network": network, "damages": damages[:18], "crews": crews,
            "events": events, "seed": 1, "config": {"horizon": 6, "dt_min": 10.0}}
