"""Key graph, connectivity metrics, node capture and the EG baseline."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from keymesh.protocol import (
    DiscoveryMessage,
    LinkKey,
    NodeState,
    Stage,
    discover_shared,
    discovery_message,
    gc_paused,
)
from keymesh.topology import ConfigError, Deployment, SimConfig


class UndefinedMetric(ValueError):
    pass


class _DisjointSet:
    def __init__(self, items):
        self.parent = {i: i for i in items}

    def find(self, a):
        parent = self.parent
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra

    def sizes(self) -> dict:
        out: dict = defaultdict(int)
        for i in self.parent:
            out[self.find(i)] += 1
        return out


@dataclass
class KeyGraph:
    """Nodes joined wherever two radio neighbours share at least one key."""

    n_nodes: int
    links: dict[tuple[int, int], LinkKey]
    _capture_index: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def edges(self) -> set[tuple[int, int]]:
        return set(self.links)

    def component_sizes(self) -> list[int]:
        ds = _DisjointSet(range(self.n_nodes))
        for u, v in self.links:
            ds.union(u, v)
        return sorted(ds.sizes().values(), reverse=True)


def build_key_graph(deployment: Deployment, states: Sequence[NodeState], config: SimConfig) -> KeyGraph:
    """Shared-key discovery over every radio-neighbour pair."""
    k, m, t_key = config.keys_per_group, config.pool_m, config.t_key
    msgs = [discovery_message(s) for s in states]
    links = {}
    with gc_paused():
        for u, v in deployment.pairs.tolist():
            link = discover_shared(states[v], msgs[u], k, m, t_key)
            if link is not None:
                links[(u, v)] = link
    for s in states:
        s.stage = Stage.DISCOVERED
    return KeyGraph(deployment.n_nodes, links)


def brute_force_key_graph(deployment: Deployment, states: Sequence[NodeState]) -> set[tuple[int, int]]:
    """Edge set by all-pairs distance test and direct ring comparison."""
    pos = deployment.positions
    r2 = deployment.radio_r ** 2
    tuples = [s.tuples() for s in states]
    edges = set()
    n = deployment.n_nodes
    for u in range(n):
        d2 = ((pos[u + 1:] - pos[u]) ** 2).sum(axis=1)
        for off in np.nonzero(d2 <= r2)[0].tolist():
            v = u + 1 + off
            if tuples[u] & tuples[v]:
                edges.add((u, v))
    return edges


def local_connectivity(graph: KeyGraph, deployment: Deployment) -> float:
    """Fraction of radio-neighbour pairs that share a key."""
    n_pairs = len(deployment.pairs)
    if n_pairs == 0:
        raise UndefinedMetric("no radio-neighbour pairs")
    return len(graph.links) / n_pairs


def global_connectivity(graph: KeyGraph) -> float:
    """Percentage of nodes in the largest connected component."""
    if graph.n_nodes == 0:
        raise UndefinedMetric("empty graph")
    return 100.0 * graph.component_sizes()[0] / graph.n_nodes


@dataclass(frozen=True)
class GroupGraph:
    vertices: frozenset[int]
    edges: frozenset[tuple[int, int]]

    def components(self) -> int:
        ds = _DisjointSet(self.vertices)
        for a, b in self.edges:
            ds.union(a, b)
        return len(ds.sizes())


def build_group_graph(states: Sequence[NodeState]) -> GroupGraph:
    vertices = set()
    edges = set()
    for s in states:
        sel = s.selected
        vertices.update(sel)
        for i, a in enumerate(sel):
            for b in sel[i + 1:]:
                edges.add((a, b))
    return GroupGraph(frozenset(vertices), frozenset(edges))


def group_graph_connected(states: Sequence[NodeState]) -> tuple[bool, int]:
    n = build_group_graph(states).components()
    return n <= 1, n


# --------------------------------------------------------------------------
# node capture


@dataclass(frozen=True)
class CaptureReport:
    x: int
    empirical_fraction: float
    analytic_bound: float
    L: int
    S: int
    eligible_links: int
    compromised_links: int


def resilience_bound(L: int, S: int, x: int) -> float:
    """Worst-case chance that a link survives none of ``x`` captures."""
    if not 0 < L <= S:
        raise ValueError("need 0 < L <= S")
    if x < 0:
        raise ValueError("x must be >= 0")
    return -math.expm1(x * math.log1p(-L / S)) if L < S else float(x > 0)


def _capture_index(graph: KeyGraph):
    if graph._capture_index is None:
        links = list(graph.links.values())
        by_tuple: dict = defaultdict(list)
        by_node: dict = defaultdict(list)
        for i, link in enumerate(links):
            for t in link.shared_tuples:
                by_tuple[t].append(i)
            for u in link.peers:
                by_node[u].append(i)
        graph._capture_index = (links, by_tuple, by_node)
    return graph._capture_index


def simulate_capture(graph: KeyGraph, states: Sequence[NodeState], x: int, rng_seed: int,
                     config: SimConfig, n_tagged: int) -> CaptureReport:
    """Capture ``x`` uniformly chosen nodes and count links they break.

    The adversary learns every tuple in the captured rings. A link key is the
    XOR of all shared keys, so a link falls only when every shared tuple is
    known. Links touching a captured node are left out of both counts.
    """
    n = len(states)
    if not 0 <= x <= n:
        raise ConfigError(f"need 0 <= x <= N, got {x}")
    L, S = config.ring_size, n_tagged * config.pool_m
    bound = resilience_bound(L, S, x)
    links, by_tuple, by_node = _capture_index(graph)
    rng = np.random.default_rng(rng_seed)
    captured = set(rng.choice(n, size=x, replace=False).tolist())
    known = set()
    for c in captured:
        known.update((e.tag_id, e.key_index) for e in states[c].ring)
    touched = {i for c in captured for i in by_node.get(c, ())}
    eligible = len(links) - len(touched)
    candidates = {i for t in known for i in by_tuple.get(t, ())} - touched
    compromised = sum(1 for i in candidates if links[i].shared_tuples <= known)
    frac = compromised / eligible if eligible else 0.0
    return CaptureReport(x, frac, bound, L, S, eligible, compromised)


# --------------------------------------------------------------------------
# EG random key predistribution baseline


def eg_local_connectivity(S_pool: int, L_ring: int) -> float:
    """Chance that two random L-subsets of an S-key pool intersect."""
    if L_ring <= 0:
        return 0.0
    if 2 * L_ring > S_pool:
        return 1.0
    log_miss = math.fsum(math.log1p(-L_ring / (S_pool - i)) for i in range(L_ring))
    return -math.expm1(log_miss)


def eg_pool_size(p: float, L_ring: int) -> int:
    """Largest pool for which an L-key EG ring still reaches connectivity ``p``."""
    if not 0 < p < 1:
        raise ValueError("p must lie in (0, 1)")
    lo = 2 * L_ring  # p = 1 for anything smaller
    if eg_local_connectivity(lo, L_ring) < p:
        raise ValueError(f"p={p} unreachable with L={L_ring}")
    hi = max(lo + 1, 2 * lo)
    while eg_local_connectivity(hi, L_ring) >= p:
        hi *= 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if eg_local_connectivity(mid, L_ring) >= p:
            lo = mid
        else:
            hi = mid
    return lo
