"""Multilevel balanced partitioning of the network into subsystems.

Coarsening by heavy-edge matching, recursive bisection along spanning-tree
edges (which keeps every part connected), then boundary-vertex refinement.
Balance is measured in bus count.
"""
from __future__ import annotations

import math
import random
from collections import deque
from dataclasses import dataclass, field

import networkx as nx
import numpy as np

from .netmodel import LinkSpec, NetworkTopology

BALANCE_TOL = 0.2


@dataclass(frozen=True)
class Link:
    line: int
    out_part: int     # lower-indexed subsystem
    in_part: int
    out_bus: int
    in_bus: int


@dataclass
class Partition:
    n_s: int
    assignment: np.ndarray          # bus index -> part
    links: list[Link] = field(default_factory=list)

    def parts(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.assignment == p) for p in range(self.n_s)]

    def sizes(self) -> list[int]:
        return [int(np.sum(self.assignment == p)) for p in range(self.n_s)]


@dataclass
class Subsystem:
    """One part of a partition, in the shape expected by the QP builder."""

    index: int
    topology: NetworkTopology
    buses: np.ndarray
    lines: np.ndarray
    links: list[LinkSpec]


def interconnect_links(assignment, topology: NetworkTopology) -> list[Link]:
    f, t = topology.endpoints()
    assignment = np.asarray(assignment)
    links = []
    for l in range(topology.n_line):
        a, b = int(f[l]), int(t[l])
        pa, pb = int(assignment[a]), int(assignment[b])
        if pa == pb:
            continue
        if pa < pb:
            links.append(Link(l, pa, pb, a, b))
        else:
            links.append(Link(l, pb, pa, b, a))
    return links


def cut_size(g: nx.Graph, assignment) -> int:
    return sum(1 for u, v in g.edges if assignment[u] != assignment[v])


def subsystems(partition: Partition, topology: NetworkTopology) -> list[Subsystem]:
    f, t = topology.endpoints()
    out = []
    for p, buses in enumerate(partition.parts()):
        inside = [l for l in range(topology.n_line)
                  if partition.assignment[f[l]] == p and partition.assignment[t[l]] == p]
        specs = []
        for lk in partition.links:
            if lk.out_part == p:
                specs.append(LinkSpec(lk.line, "out", lk.out_bus, 1 if f[lk.line] == lk.out_bus else -1))
            elif lk.in_part == p:
                specs.append(LinkSpec(lk.line, "in", lk.in_bus, 1 if f[lk.line] == lk.out_bus else -1))
        out.append(Subsystem(p, topology, buses, np.array(inside, dtype=int), specs))
    return out


def from_assignment(topology: NetworkTopology, mapping: dict[str, int]) -> Partition:
    """Partition from an explicit bus-id -> part map (parts renumbered densely)."""
    labels = sorted(set(mapping.values()))
    relabel = {lab: i for i, lab in enumerate(labels)}
    try:
        assign = np.array([relabel[mapping[b.id]] for b in topology.buses], dtype=int)
    except KeyError as exc:
        raise ValueError(f"partition map misses bus {exc.args[0]}") from None
    return Partition(len(labels), assign, interconnect_links(assign, topology))


ATTEMPTS = 8


def partition_network(topology: NetworkTopology, n_s: int, seed: int = 0) -> Partition:
    """Balanced min-cut partition into ``n_s`` connected parts.

    Multilevel coarsening, recursive bisection and boundary refinement,
    restarted ATTEMPTS times; the best attempt is the first one ranked by
    (connected, balanced, cut size).  Balance is given up before
    connectivity when a graph admits no partition with both.
    """
    n = topology.n_bus
    if not 1 <= n_s <= n:
        raise ValueError(f"n_s must lie in [1, {n}], got {n_s}")
    if n_s == 1:
        assign = np.zeros(n, dtype=int)
        return Partition(1, assign, [])

    g = nx.Graph()
    g.add_nodes_from(range(n), weight=1)
    for u, v in topology.graph().edges:
        g.add_edge(u, v, weight=1)

    best = None
    for attempt in range(ATTEMPTS):
        arr = _attempt(g, n_s, random.Random(f"{seed}:{attempt}"))
        part = Partition(n_s, arr, interconnect_links(arr, topology))
        key = (not parts_connected(part, topology), not is_balanced(part), len(part.links), attempt)
        if best is None or key < best[0]:
            best = (key, part)
    return best[1]


def _attempt(g: nx.Graph, n_s: int, rng: random.Random) -> np.ndarray:
    n = g.number_of_nodes()
    levels = _coarsen(g, n_s, rng)
    coarse = levels[-1][0]
    assign = _recursive_bisect(coarse, list(coarse.nodes), n_s, 0, rng)
    mean = n / n_s
    for graph, mapping in reversed(levels[:-1]):
        assign = {v: assign[mapping[v]] for v in graph.nodes}
        assign = _rebalance(graph, assign, n_s, mean)
        assign = _refine(graph, assign, n_s, mean)
    if len(levels) == 1:
        assign = _rebalance(g, assign, n_s, mean)
        assign = _refine(g, assign, n_s, mean)
    arr = np.array([assign[v] for v in range(n)], dtype=int)
    return _relabel_by_first_bus(arr)


def _relabel_by_first_bus(arr: np.ndarray) -> np.ndarray:
    order = {}
    for p in arr:
        order.setdefault(int(p), len(order))
    return np.array([order[int(p)] for p in arr], dtype=int)


def _coarsen(g: nx.Graph, n_s: int, rng: random.Random):
    """Return [(graph, mapping_to_coarser)], finest first; last mapping is None."""
    total = sum(d["weight"] for _, d in g.nodes(data=True))
    cap = max(1, int(0.2 * total / n_s))
    target = max(20, 6 * n_s)
    levels = []
    cur = g
    while cur.number_of_nodes() > target:
        nodes = sorted(cur.nodes)
        rng.shuffle(nodes)
        match = {}
        for v in nodes:
            if v in match:
                continue
            best, best_w = None, -1
            for u in sorted(cur.neighbors(v)):
                if u in match:
                    continue
                if cur.nodes[u]["weight"] + cur.nodes[v]["weight"] > cap:
                    continue
                w = cur.edges[v, u]["weight"]
                if w > best_w or (w == best_w and cur.nodes[u]["weight"] < cur.nodes[best]["weight"]):
                    best, best_w = u, w
            match[v] = best if best is not None else v
            if best is not None:
                match[best] = v
        mapping = {}
        nxt = nx.Graph()
        for v in sorted(cur.nodes):
            if v in mapping:
                continue
            u = match[v]
            c = len(set(mapping.values()))
            mapping[v] = c
            mapping[u] = c
            nxt.add_node(c, weight=cur.nodes[v]["weight"] + (cur.nodes[u]["weight"] if u != v else 0))
        for a, b, d in cur.edges(data=True):
            ca, cb = mapping[a], mapping[b]
            if ca == cb:
                continue
            w = nxt.edges[ca, cb]["weight"] + d["weight"] if nxt.has_edge(ca, cb) else d["weight"]
            nxt.add_edge(ca, cb, weight=w)
        if nxt.number_of_nodes() >= cur.number_of_nodes() * 0.95:
            break
        levels.append((cur, mapping))
        cur = nxt
    levels.append((cur, None))
    return levels


def _recursive_bisect(g: nx.Graph, nodes: list, k: int, offset: int, rng: random.Random) -> dict:
    if k == 1:
        return {v: offset for v in nodes}
    k1 = k // 2
    sub = g.subgraph(nodes)
    left, right = _bisect(sub, k1 / k, rng)
    out = _recursive_bisect(g, left, k1, offset, rng)
    out.update(_recursive_bisect(g, right, k - k1, offset + k1, rng))
    return out


def _bisect(g: nx.Graph, frac: float, rng: random.Random, tries: int = 8):
    """Split along a spanning-tree edge so both halves stay connected."""
    total = sum(g.nodes[v]["weight"] for v in g.nodes)
    target = frac * total
    nodes = sorted(g.nodes)
    roots = [nodes[0]] + rng.sample(nodes, min(tries - 1, len(nodes)))
    best = None
    for root in roots:
        parent = {root: None}
        order = []
        dq = deque([root])
        while dq:
            v = dq.popleft()
            order.append(v)
            for u in sorted(g.neighbors(v)):
                if u not in parent:
                    parent[u] = v
                    dq.append(u)
        sub_w = {v: g.nodes[v]["weight"] for v in order}
        for v in reversed(order[1:]):
            sub_w[parent[v]] += sub_w[v]
        for v in order[1:]:
            side = _subtree(v, parent, order)
            cut = sum(1 for a in side for b in g.neighbors(a) if b not in side)
            for flip in (False, True):
                w = total - sub_w[v] if flip else sub_w[v]
                key = (abs(w - target), cut, v, flip)
                if best is None or key < best[0]:
                    best = (key, side, flip)
    _, side, flip = best
    inside = sorted(side)
    outside = sorted(v for v in nodes if v not in side)
    return (outside, inside) if flip else (inside, outside)


def _subtree(v, parent, order) -> set:
    kids = {}
    for u in order:
        p = parent[u]
        if p is not None:
            kids.setdefault(p, []).append(u)
    out = set()
    stack = [v]
    while stack:
        a = stack.pop()
        out.add(a)
        stack.extend(kids.get(a, ()))
    return out


def _refine(g: nx.Graph, assign: dict, n_s: int, mean: float, passes: int = 10) -> dict:
    """Greedy boundary moves that strictly reduce the cut, keep balance and connectivity."""
    weight = {v: g.nodes[v]["weight"] for v in g.nodes}
    size = [0.0] * n_s
    for v, p in assign.items():
        size[p] += weight[v]
    lo, hi = _bounds(mean)
    for _ in range(passes):
        moved = False
        for v in sorted(g.nodes):
            p = assign[v]
            gains = {}
            for u in g.neighbors(v):
                q = assign[u]
                w = g.edges[v, u]["weight"]
                gains[q] = gains.get(q, 0) + w
            internal = gains.pop(p, 0)
            for q in sorted(gains):
                gain = gains[q] - internal
                if gain <= 0:
                    continue
                if size[p] - weight[v] < lo or size[q] + weight[v] > hi:
                    continue
                if not _movable(g, assign, v):
                    continue
                assign[v] = q
                size[p] -= weight[v]
                size[q] += weight[v]
                moved = True
                break
        if not moved:
            break
    return assign


def _movable(g: nx.Graph, assign: dict, v) -> bool:
    members = [u for u in g.nodes if assign[u] == assign[v] and u != v]
    return bool(members) and nx.is_connected(g.subgraph(members))


def _bounds(mean: float) -> tuple[float, float]:
    """Balance window around ``mean``, widened to whole buses."""
    return (math.floor((1 - BALANCE_TOL) * mean + 1e-9),
            math.ceil((1 + BALANCE_TOL) * mean - 1e-9))


def _branch(g: nx.Graph, assign: dict, v) -> set | None:
    """``v`` plus whatever of its part would be cut off without it (None if v is the whole part)."""
    members = [u for u in g.nodes if assign[u] == assign[v] and u != v]
    if not members:
        return None
    comps = sorted(nx.connected_components(g.subgraph(members)), key=lambda c: (-len(c), min(c)))
    out = {v}
    for c in comps[1:]:
        out |= c
    return out


def _rebalance(g: nx.Graph, assign: dict, n_s: int, mean: float, max_moves: int = 10_000) -> dict:
    """Move boundary branches out of overfull parts (or into underfull ones), cheapest first.

    A branch is a boundary vertex together with the pieces of its part that
    hang off it, so both parts stay connected after the move.
    """
    weight = {v: g.nodes[v]["weight"] for v in g.nodes}
    size = [0.0] * n_s
    for v, p in assign.items():
        size[p] += weight[v]
    lo, hi = _bounds(mean)
    for _ in range(max_moves):
        over = [p for p in range(n_s) if size[p] > hi]
        under = [p for p in range(n_s) if size[p] < lo]
        if not over and not under:
            break
        best = None
        for v in sorted(g.nodes):
            p = assign[v]
            targets = sorted({assign[u] for u in g.neighbors(v)} - {p})
            if not targets:
                continue
            if not (size[p] > hi or any(size[q] < lo for q in targets)):
                continue
            branch = _branch(g, assign, v)
            if branch is None:
                continue
            w = sum(weight[u] for u in branch)
            if size[p] - w < lo and not size[p] > hi:
                continue
            for q in targets:
                if size[q] + w > hi:
                    continue
                before = after = 0
                for a in branch:
                    for b in g.neighbors(a):
                        if b in branch:
                            continue
                        ew = g.edges[a, b]["weight"]
                        before += ew * (assign[b] != p)
                        after += ew * (assign[b] != q)
                # Prefer moves that fix the worst violation, then small cut growth.
                fix = max(size[p] - hi, 0) + max(lo - size[q], 0)
                key = (-min(fix, w), after - before, w, v, q)
                if best is None or key < best[0]:
                    best = (key, branch, q)
        if best is None:
            break
        _, branch, q = best
        for u in branch:
            size[assign[u]] -= weight[u]
            size[q] += weight[u]
            assign[u] = q
    return assign


def is_balanced(partition: Partition) -> bool:
    lo, hi = _bounds(len(partition.assignment) / partition.n_s)
    return all(lo <= s <= hi for s in partition.sizes())


def parts_connected(partition: Partition, topology: NetworkTopology) -> bool:
    g = topology.graph()
    return all(len(p) > 0 and nx.is_connected(g.subgraph(p.tolist())) for p in partition.parts())
