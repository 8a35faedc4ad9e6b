"""Deployment, unit-disk radio graph, TTL flooding and tagged-node planning."""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.optimize import minimize_scalar

from keymesh import crypto

# Calibrated so that the inter-group planner gives T_i = 1863 for the
# 10000-node, 1 km^2, r = 40 m reference network.
DEFAULT_BETA = 0.1054
BISECT_TOL = 1e-6


class ConfigError(ValueError):
    pass


class PlannerInfeasible(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    side: float = 1000.0
    n_nodes: int = 10000
    radio_r: float = 40.0
    hops: int = 1
    t_key: int = 2
    keys_per_group: int = 20
    pool_m: int = 1000
    beta: float = DEFAULT_BETA
    tagged: int | None = None  # None: plan it
    rng_seed: int = 0
    checkpoint_stride: int = 50

    def __post_init__(self):
        problems = []
        if not self.side > 0:
            problems.append("side must be > 0")
        if self.n_nodes < 1:
            problems.append("n_nodes must be >= 1")
        if not 0 < self.radio_r < self.side:
            problems.append("radio_r must lie in (0, side)")
        if self.hops < 1:
            problems.append("hops must be >= 1")
        if self.t_key < 1:
            problems.append("t_key must be >= 1")
        if not 1 <= self.keys_per_group <= self.pool_m:
            problems.append("need 1 <= keys_per_group <= pool_m")
        if not self.beta > 0:
            problems.append("beta must be > 0")
        if self.tagged is not None and not 0 <= self.tagged < self.n_nodes:
            problems.append("tagged must satisfy 0 <= tagged < n_nodes")
        if not 0 <= self.rng_seed < 2**64:
            problems.append("rng_seed must be an unsigned 64-bit integer")
        if self.checkpoint_stride < 1:
            problems.append("checkpoint_stride must be >= 1")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def area(self) -> float:
        return self.side * self.side

    @property
    def ring_size(self) -> int:
        return self.t_key * self.keys_per_group

    def with_(self, **changes) -> "SimConfig":
        return replace(self, **changes)

    def resolved_tagged(self) -> int:
        return self.tagged if self.tagged is not None else plan_tagged(self)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tagged"] = "auto" if self.tagged is None else self.tagged
        return d

    @classmethod
    def from_dict(cls, data: Mapping) -> "SimConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        tagged = data.get("tagged")
        if tagged == "auto":
            data["tagged"] = None
        elif tagged is not None and not isinstance(tagged, int):
            raise ConfigError('tagged must be an integer or "auto"')
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "SimConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# deployment


def unit_disk_pairs(positions: np.ndarray, r: float) -> np.ndarray:
    """All pairs (u, v), u < v, at Euclidean distance <= r.

    Points are bucketed into square cells of side r so only the 3x3 block of
    cells around each point is examined. Rows come out sorted.
    """
    n = len(positions)
    if n < 2:
        return np.empty((0, 2), dtype=np.int64)
    cells = np.floor(positions / r).astype(np.int64)
    buckets: dict[tuple[int, int], list[int]] = defaultdict(list)
    for i, (cx, cy) in enumerate(map(tuple, cells)):
        buckets[(cx, cy)].append(i)
    members = {c: np.asarray(ids, dtype=np.int64) for c, ids in buckets.items()}
    r2 = r * r
    chunks = []
    # half stencil: each unordered cell pair is visited once
    offsets = [(0, 0), (1, -1), (1, 0), (1, 1), (0, 1)]
    for (cx, cy), a in members.items():
        pa = positions[a]
        for dx, dy in offsets:
            b = members.get((cx + dx, cy + dy))
            if b is None:
                continue
            d2 = ((pa[:, None, :] - positions[b][None, :, :]) ** 2).sum(axis=2)
            ia, ib = np.nonzero(d2 <= r2)
            u, v = a[ia], b[ib]
            if dx == 0 and dy == 0:
                keep = u < v
                u, v = u[keep], v[keep]
            chunks.append(np.stack([np.minimum(u, v), np.maximum(u, v)], axis=1))
    pairs = np.concatenate(chunks) if chunks else np.empty((0, 2), dtype=np.int64)
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    return pairs[order]


def adjacency_from_pairs(n: int, pairs: np.ndarray) -> tuple[tuple[int, ...], ...]:
    nbrs: list[list[int]] = [[] for _ in range(n)]
    for u, v in pairs.tolist():
        nbrs[u].append(v)
        nbrs[v].append(u)
    return tuple(tuple(sorted(x)) for x in nbrs)


@dataclass(frozen=True)
class Deployment:
    """Node positions, tagging and radio adjacency; immutable once built.

    Tag ids run 1..T and are handed out in the order tagged nodes were drawn.
    """

    side: float
    radio_r: float
    positions: np.ndarray
    tag_of: Mapping[int, int]
    adjacency: tuple[tuple[int, ...], ...]
    pairs: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.positions)

    @property
    def tagged(self) -> frozenset[int]:
        return frozenset(self.tag_of)

    @property
    def n_tagged(self) -> int:
        return len(self.tag_of)

    def node_of_tag(self, tag: int) -> int:
        for node, t in self.tag_of.items():
            if t == tag:
                return node
        raise KeyError(tag)

    @classmethod
    def from_positions(cls, positions, tag_of: Mapping[int, int], side: float, radio_r: float):
        pos = np.array(positions, dtype=float).reshape(-1, 2)
        if len(pos) and (pos.min() < 0 or pos.max() > side):
            raise ConfigError("positions must lie inside [0, side]^2")
        if any(not 0 <= u < len(pos) for u in tag_of):
            raise ConfigError("tagged node id out of range")
        if sorted(tag_of.values()) != list(range(1, len(tag_of) + 1)):
            raise ConfigError("tag ids must be exactly 1..T")
        pos.setflags(write=False)
        pairs = unit_disk_pairs(pos, radio_r)
        pairs.setflags(write=False)
        return cls(
            side=side,
            radio_r=radio_r,
            positions=pos,
            tag_of=dict(tag_of),
            adjacency=adjacency_from_pairs(len(pos), pairs),
            pairs=pairs,
        )

    def with_node(self, position) -> "Deployment":
        """Copy with one extra, untagged node appended (id = current count)."""
        x, y = position
        if not (0 <= x <= self.side and 0 <= y <= self.side):
            raise ConfigError(f"position {position} outside the deployment area")
        pos = np.vstack([self.positions, [[x, y]]])
        return Deployment.from_positions(pos, self.tag_of, self.side, self.radio_r)

    def to_csv(self) -> str:
        lines = ["node_id,x,y,is_tagged"]
        for u, (x, y) in enumerate(self.positions.tolist()):
            lines.append(f"{u},{x!r},{y!r},{int(u in self.tag_of)}")
        return "\n".join(lines) + "\n"


def deploy(config: SimConfig, rng_seed: int | None = None, n_tagged: int | None = None) -> Deployment:
    """Uniform i.i.d. placement with ``T`` tagged nodes chosen without replacement."""
    seed = config.rng_seed if rng_seed is None else rng_seed
    t = config.resolved_tagged() if n_tagged is None else n_tagged
    if not 0 <= t < config.n_nodes:
        raise ConfigError(f"need 0 <= T < N, got T={t}, N={config.n_nodes}")
    rng = np.random.default_rng(seed)
    positions = rng.uniform(0.0, config.side, size=(config.n_nodes, 2))
    chosen = rng.choice(config.n_nodes, size=t, replace=False)
    tag_of = {int(u): i + 1 for i, u in enumerate(chosen)}
    return Deployment.from_positions(positions, tag_of, config.side, config.radio_r)


# --------------------------------------------------------------------------
# broadcast phase


@dataclass(frozen=True)
class FloodResult:
    received: tuple[frozenset[int], ...]
    transmissions: int
    rejected: int = 0

    def __getitem__(self, node: int) -> frozenset[int]:
        return self.received[node]


def flood(
    deployment: Deployment,
    hops: int,
    global_key: bytes | None = None,
    node_keys: Mapping[int, bytes] | None = None,
) -> FloodResult:
    """Hop-limited flooding of every tagged node's id.

    Rounds are synchronous, so a node first hears a tag at its hop distance.
    A node stores an unseen tag id, decrements the hop count and re-broadcasts
    unless it reached 0; repeated tag ids are ignored. With ``global_key``
    every packet carries a MAC, and receivers holding a different key (see
    ``node_keys``) drop it. A dropped packet is neither stored nor relayed.
    """
    if hops < 1:
        raise ConfigError("hops must be >= 1")
    n = deployment.n_nodes
    adj = deployment.adjacency
    received: list[set[int]] = [set() for _ in range(n)]
    transmissions = rejected = 0
    node_keys = node_keys or {}

    def key_of(u):
        return node_keys.get(u, global_key)

    for src, tag in sorted(deployment.tag_of.items(), key=lambda kv: kv[1]):
        received[src].add(tag)
        frontier = [src]
        ttl = hops
        while frontier and ttl > 0:
            nxt = []
            for sender in frontier:
                transmissions += 1
                if global_key is not None:
                    body = tag.to_bytes(4, "big") + ttl.to_bytes(2, "big")
                    mac = crypto.mac_tag(key_of(sender), body)
                for v in adj[sender]:
                    if global_key is not None and not crypto.verify_tag(key_of(v), body, mac):
                        rejected += 1
                        continue
                    if tag in received[v]:
                        continue
                    received[v].add(tag)
                    if ttl - 1 > 0:
                        nxt.append(v)
            frontier = nxt
            ttl -= 1
    return FloodResult(tuple(frozenset(s) for s in received), transmissions, rejected)


def disk_members(deployment: Deployment, radius: float) -> tuple[frozenset[int], ...]:
    """Tag ids within Euclidean ``radius`` of each node (direct geometric check)."""
    out: list[set[int]] = [set() for _ in range(deployment.n_nodes)]
    pos = deployment.positions
    for src, tag in deployment.tag_of.items():
        d2 = ((pos - pos[src]) ** 2).sum(axis=1)
        for v in np.nonzero(d2 <= radius * radius)[0].tolist():
            out[v].add(tag)
    return tuple(frozenset(s) for s in out)


@dataclass(frozen=True)
class CoverageStats:
    uncovered_count: int
    expected_uncovered: float
    groups_per_node: Mapping[int, int]


def coverage_stats(config: SimConfig, deployment: Deployment, flooded: FloodResult) -> CoverageStats:
    uncovered = sum(
        1 for u in range(deployment.n_nodes) if u not in deployment.tag_of and not flooded[u]
    )
    n = deployment.n_tagged
    expected = expected_uncovered(config, n) if 0 < n < config.n_nodes else float("nan")
    hist = Counter(len(b) for b in flooded.received)
    return CoverageStats(uncovered, expected, dict(sorted(hist.items())))


# --------------------------------------------------------------------------
# planning


def expected_uncovered(config: SimConfig, n: float) -> float:
    """Expected count of normal nodes outside every tagged node's H*r disk."""
    reach = config.hops * config.radio_r
    return (config.n_nodes - n) * math.exp(-(n / config.area) * math.pi * reach * reach)


def _bisect(f, lo: float, hi: float, tol: float = BISECT_TOL) -> float:
    flo = f(lo)
    if flo == 0:
        return lo
    if (flo > 0) == (f(hi) > 0):
        raise PlannerInfeasible(f"no sign change on [{lo}, {hi}]")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if fm == 0:
            return mid
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return hi


def plan_coverage(config: SimConfig) -> int:
    """Smallest tagged count that leaves fewer than one uncovered node on average."""
    n_max = config.n_nodes - 1
    if n_max < 1 or expected_uncovered(config, n_max) > 1:
        raise PlannerInfeasible("coverage cannot reach E[uncovered] <= 1 below N")
    root = _bisect(lambda n: expected_uncovered(config, n) - 1.0, 0.0, float(n_max))
    t = max(1, math.ceil(root))
    # guard the ceiling against float noise around integer roots
    while t > 1 and expected_uncovered(config, t - 1) <= 1.0:
        t -= 1
    while expected_uncovered(config, t) > 1.0:
        t += 1
    return t


def intergroup_radius(n: float, n_nodes: int, beta: float) -> float:
    """Threshold radius (unit square) for the AB graph of n A-nodes among n_nodes."""
    c = (n_nodes - n) / n
    arg = math.log(n / beta) / (c * n * math.pi)
    if arg <= 0:
        return 0.0
    return (2 + math.sqrt(c)) / 2 * math.sqrt(arg)


def plan_intergroup(config: SimConfig) -> int:
    """Tagged count at which the gateway graph between groups connects.

    The threshold radius falls, reaches a minimum and then rises again as n
    grows (c -> 0), so the root is taken on the falling branch: bisection
    between n = 1 (or the peak, when beta >= 1) and the minimiser.
    """
    target = config.hops * config.radio_r / config.side
    n_nodes = config.n_nodes

    def f(n):
        return intergroup_radius(n, n_nodes, config.beta) - target

    lo, hi = 1.0, float(n_nodes - 1)
    if hi <= lo:
        raise PlannerInfeasible("need at least 3 nodes")
    turn = minimize_scalar(f, bounds=(lo, hi), method="bounded", options={"xatol": 1e-3}).x
    if f(lo) <= 0:
        # beta >= 1: the radius starts at 0 and peaks before falling
        lo = minimize_scalar(lambda n: -f(n), bounds=(lo, turn), method="bounded",
                             options={"xatol": 1e-3}).x
    if f(turn) > 0:
        raise PlannerInfeasible(
            f"gateway radius never drops to H*r/side={target:.4g} "
            f"(minimum {f(turn) + target:.4g} at n={turn:.0f})"
        )
    root = _bisect(f, lo, turn)
    return math.ceil(root)


def plan_tagged(config: SimConfig) -> int:
    return max(plan_coverage(config), plan_intergroup(config))
