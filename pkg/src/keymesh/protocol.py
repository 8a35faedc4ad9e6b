"""Per-node protocol: group selection, key rings, discovery, rescue, addition."""

from __future__ import annotations

import enum
import gc
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

from keymesh import crypto
from keymesh.crypto import ChainCheckpoints, index_set
from keymesh.topology import ConfigError, Deployment, FloodResult, SimConfig, flood

# Seeds of sink-installed (rescue) key sets live far above any node's
# regular range T_key*u + 1 .. T_key*(u+1).
RESCUE_SEED_BASE = 1 << 62


class Stage(enum.IntEnum):
    PREDEPLOYED = 0
    BROADCAST_DONE = 1
    KEYS_GENERATED = 2
    DISCOVERED = 3


class InvalidStage(RuntimeError):
    pass


class RingEntry(NamedTuple):
    tag_id: int
    key_index: int
    key: bytes


@dataclass(frozen=True)
class KeyMaterial:
    """What every node carries before deployment."""

    root: bytes
    global_key: bytes
    checkpoints: ChainCheckpoints

    @classmethod
    def from_seed(cls, seed: int, max_tag: int, stride: int = 50) -> "KeyMaterial":
        s = seed.to_bytes(8, "big")
        root = crypto.digest(b"keymesh/root/" + s)
        return cls(
            root=root,
            global_key=crypto.digest(b"keymesh/global/" + s),
            checkpoints=crypto.build_checkpoints(root, max_tag, stride),
        )


@dataclass(eq=False)
class NodeState:
    node_id: int
    stage: Stage = Stage.PREDEPLOYED
    received: frozenset[int] = frozenset()
    selected: tuple[int, ...] = ()
    ring: list[RingEntry] = field(default_factory=list)
    slot_seeds: tuple[int, ...] = ()
    rescued: bool = False
    global_key: bytes | None = field(default=None, repr=False)
    root_key: bytes | None = field(default=None, repr=False)
    checkpoints: ChainCheckpoints | None = field(default=None, repr=False)
    _by_tuple: dict | None = field(default=None, repr=False)
    _slot_sets: tuple | None = field(default=None, repr=False)

    @property
    def global_key_present(self) -> bool:
        return self.global_key is not None

    @property
    def root_key_present(self) -> bool:
        return self.root_key is not None

    def tuples(self) -> frozenset[tuple[int, int]]:
        return frozenset((e.tag_id, e.key_index) for e in self.ring)

    def keys_by_tuple(self) -> dict[tuple[int, int], bytes]:
        if self._by_tuple is None:
            self._by_tuple = {(t, i): key for t, i, key in self.ring}
        return self._by_tuple

    def key_for(self, tag_id: int, key_index: int) -> bytes:
        return self.keys_by_tuple()[(tag_id, key_index)]

    def slot_index_sets(self) -> tuple[frozenset[int], ...]:
        """Distinct key indices of each selected slot, in slot order."""
        if self._slot_sets is None:
            sets: dict[int, set[int]] = {t: set() for t in self.selected}
            for t, i, _ in self.ring:
                sets[t].add(i)
            self._slot_sets = tuple(frozenset(sets[t]) for t in self.selected)
        return self._slot_sets


def predeploy(node_id: int, material: KeyMaterial) -> NodeState:
    return NodeState(
        node_id=node_id,
        global_key=material.global_key,
        root_key=material.root,
        checkpoints=material.checkpoints,
    )


def slot_seed(node_id: int, slot: int, t_key: int, rescued: bool = False) -> int:
    """PRNG seed of the ``slot``-th (1-based) selected group of a node."""
    base = RESCUE_SEED_BASE if rescued else 0
    return base + t_key * node_id + slot


def select_groups(received: Iterable[int], t_key: int) -> tuple[int, ...]:
    """The ``t_key`` smallest tag ids, ascending."""
    return tuple(sorted(received)[:t_key])


def finish_broadcast(node: NodeState, received: Iterable[int], t_key: int) -> NodeState:
    if node.stage is not Stage.PREDEPLOYED:
        raise InvalidStage(f"node {node.node_id} is at {node.stage.name}")
    node.received = frozenset(received)
    node.selected = select_groups(node.received, t_key)
    node.stage = Stage.BROADCAST_DONE
    return node


def generate_ring(node: NodeState, k: int, m: int, t_key: int,
                  group_keys: dict[int, bytes] | None = None,
                  slot_keys: dict[int, tuple[int, list[bytes]]] | None = None) -> NodeState:
    """Derive the node's key ring from its preloaded root key, then erase it.

    Slot s pairs the s-th smallest selected tag with the key indices drawn
    from seed ``t_key*u + s``. ``group_keys`` (tag -> group key) and
    ``slot_keys`` (seed -> (tag, derived keys in draw order)) are optional
    memos owned by the caller; neither lives on a node.
    """
    if node.stage is not Stage.BROADCAST_DONE:
        raise InvalidStage(f"node {node.node_id} is at {node.stage.name}")
    if node.root_key is None:
        raise InvalidStage(f"node {node.node_id} holds no root key")
    derive = crypto.derive_key
    ring = []
    seeds = []
    for slot, tag in enumerate(node.selected, start=1):
        seed = slot_seed(node.node_id, slot, t_key)
        gk = group_keys.get(tag) if group_keys is not None else None
        if gk is None:
            gk = crypto.group_key(tag, node.root_key, node.checkpoints)
            if group_keys is not None:
                group_keys[tag] = gk
        indices = crypto.key_indices(seed, k, m)
        if slot_keys is None:
            ring.extend(RingEntry(tag, idx, derive(gk, idx)) for idx in indices)
        else:
            cached = slot_keys.get(seed)
            if cached is None or cached[0] != tag:
                cached = slot_keys[seed] = (tag, [])
            keys = cached[1]
            if len(keys) < k:
                keys.extend(derive(gk, idx) for idx in indices[len(keys):])
            ring.extend(RingEntry(tag, idx, key) for idx, key in zip(indices, keys))
        seeds.append(seed)
        del gk
    node.ring = ring
    node.slot_seeds = tuple(seeds)
    node.root_key = None
    node.checkpoints = None
    node._by_tuple = node._slot_sets = None
    node.stage = Stage.KEYS_GENERATED
    return node


# --------------------------------------------------------------------------
# discovery


class DiscoveryMessage(NamedTuple):
    node_id: int
    selected: tuple[int, ...]
    rescued: bool = False

    def encode(self) -> str:
        text = f"u:{self.node_id};T:{','.join(map(str, self.selected))}"
        return text + ";R:1" if self.rescued else text

    @classmethod
    def decode(cls, text: str) -> "DiscoveryMessage":
        fields = dict(part.split(":", 1) for part in text.strip().split(";"))
        tags = tuple(int(t) for t in fields["T"].split(",")) if fields["T"] else ()
        if list(tags) != sorted(set(tags)):
            raise ValueError(f"tag list not strictly ascending: {text!r}")
        return cls(int(fields["u"]), tags, fields.get("R") == "1")


def discovery_message(node: NodeState) -> DiscoveryMessage:
    if node.stage < Stage.KEYS_GENERATED:
        raise InvalidStage(f"node {node.node_id} is at {node.stage.name}")
    return DiscoveryMessage(node.node_id, node.selected, node.rescued)


@dataclass(frozen=True)
class LinkKey:
    peers: tuple[int, int]
    shared_tuples: frozenset[tuple[int, int]]
    key: bytes


def discover_shared(v: NodeState, msg: DiscoveryMessage, k: int, m: int, t_key: int) -> LinkKey | None:
    """Node ``v``'s view of the keys it shares with the sender of ``msg``.

    Only message contents and v's own ring are used: the sender's key indices
    are regenerated from its seeds.
    """
    if v.stage < Stage.KEYS_GENERATED:
        raise InvalidStage(f"node {v.node_id} is at {v.stage.name}")
    mine_sel = v.selected
    mine_sets = v.slot_index_sets()
    shared = None
    base = t_key * msg.node_id + (RESCUE_SEED_BASE if msg.rescued else 0)
    # msg.selected is ascending, so 1-based ranks come from enumerate
    for a, tag in enumerate(msg.selected, start=1):
        if tag in mine_sel:
            common = index_set(base + a, k, m) & mine_sets[mine_sel.index(tag)]
            if common:
                if shared is None:
                    shared = []
                shared += [(tag, idx) for idx in common]
    if shared is None:
        return None
    keys = v.keys_by_tuple()
    key = keys[shared[0]] if len(shared) == 1 else crypto.xor_keys(keys[t] for t in shared)
    u, w = msg.node_id, v.node_id
    return LinkKey((u, w) if u < w else (w, u), frozenset(shared), key)


# --------------------------------------------------------------------------
# whole-network runs


@contextmanager
def gc_paused():
    """Suspend the cyclic collector while building millions of small objects.

    Simulation objects hold no reference cycles, so refcounting still frees
    them; a full collection over them is pure overhead. Usable as a decorator.
    """
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if was_enabled:
            gc.enable()


@dataclass
class NetworkRun:
    config: SimConfig
    deployment: Deployment
    material: KeyMaterial
    flooded: FloodResult
    states: list[NodeState]


def run_key_setup(config: SimConfig, deployment: Deployment, material: KeyMaterial | None = None,
                  flooded: FloodResult | None = None,
                  slot_keys: dict[int, tuple[int, list[bytes]]] | None = None) -> NetworkRun:
    """Predeployment, broadcast and key generation for every node.

    ``slot_keys`` lets runs that share material, flood and t_key reuse
    derived keys across different k (rings are nested in k).
    """
    if material is None:
        material = KeyMaterial.from_seed(config.rng_seed, max(1, deployment.n_tagged),
                                         config.checkpoint_stride)
    if flooded is None:
        flooded = flood(deployment, config.hops, material.global_key)
    states = []
    memo: dict[int, bytes] = {}
    with gc_paused():
        for u in range(deployment.n_nodes):
            node = predeploy(u, material)
            finish_broadcast(node, flooded[u], config.t_key)
            generate_ring(node, config.keys_per_group, config.pool_m, config.t_key, memo, slot_keys)
            states.append(node)
    memo.clear()
    return NetworkRun(config, deployment, material, flooded, states)


def rescue_uncovered(deployment: Deployment, states: Sequence[NodeState], k: int, m: int,
                     t_key: int, material: KeyMaterial) -> list[int]:
    """Sink-installed keys for nodes that heard no tagged broadcast.

    The sink draws ``k`` indices from the pool of the smallest group among
    the node's radio neighbours. Returns the rescued node ids.
    """
    if any(s.stage < Stage.KEYS_GENERATED for s in states):
        raise InvalidStage("key generation must finish network-wide before rescue")
    rescued = []
    for node in states:
        if node.ring:
            continue
        groups = {t for w in deployment.adjacency[node.node_id] for t in states[w].selected
                  if not states[w].rescued}
        if not groups:
            continue
        tag = min(groups)
        seed = slot_seed(node.node_id, 1, t_key, rescued=True)
        gk = crypto.group_key(tag, material.root, material.checkpoints)
        node.ring = [RingEntry(tag, idx, crypto.derive_key(gk, idx))
                     for idx in crypto.key_indices(seed, k, m)]
        node.selected = (tag,)
        node.slot_seeds = (seed,)
        node.rescued = True
        node._by_tuple = node._slot_sets = None
        rescued.append(node.node_id)
    return rescued


def add_node(deployment: Deployment, position, config: SimConfig,
             material: KeyMaterial) -> tuple[NodeState, Deployment]:
    """Deploy one more node after setup; existing nodes are left untouched."""
    grown = deployment.with_node(position)
    flooded = flood(grown, config.hops, material.global_key)
    node = predeploy(grown.n_nodes - 1, material)
    finish_broadcast(node, flooded[node.node_id], config.t_key)
    generate_ring(node, config.keys_per_group, config.pool_m, config.t_key)
    return node, grown


def count_setup_broadcasts(deployment: Deployment, hops: int) -> tuple[int, int]:
    """(broadcast-phase transmissions, one-transmission-per-node baseline)."""
    return flood(deployment, hops).transmissions, deployment.n_nodes


def ring_csv(states: Sequence[NodeState]) -> str:
    lines = ["node_id,tag_id,key_index,key_hex"]
    for s in states:
        lines.extend(f"{s.node_id},{e.tag_id},{e.key_index},{e.key.hex()}" for e in s.ring)
    return "\n".join(lines) + "\n"


def transcript(states: Sequence[NodeState]) -> str:
    return "".join(discovery_message(s).encode() + "\n" for s in sorted(states, key=lambda s: s.node_id))
