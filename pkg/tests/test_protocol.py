import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import TOY, build_network, reachable_bytes
from keymesh import analysis, crypto, protocol, topology
from keymesh.protocol import InvalidStage, KeyMaterial, Stage

MATERIAL = KeyMaterial.from_seed(1, 100)


def _state(node_id, received, t_key=4, k=5, m=50):
    s = protocol.predeploy(node_id, MATERIAL)
    protocol.finish_broadcast(s, received, t_key)
    return protocol.generate_ring(s, k, m, t_key)


# -- group selection --------------------------------------------------------

def test_select_smallest():
    assert protocol.select_groups({7, 3, 9, 2}, 2) == (2, 3)
    assert protocol.select_groups({5}, 4) == (5,)
    assert protocol.select_groups(set(), 3) == ()


def test_identical_receptions_choose_same_group():
    b = {11, 4, 30, 8}
    assert protocol.select_groups(b, 1) == protocol.select_groups(set(b), 1) == (4,)
    # a uniform random choice agrees only 1/4 of the time
    rng = random.Random(0)
    agree = np.mean([rng.choice(sorted(b)) == rng.choice(sorted(b)) for _ in range(20000)])
    assert agree == pytest.approx(0.25, abs=0.02)


@given(st.frozensets(st.integers(1, 500)), st.integers(1, 8))
def test_selection_properties(b, t_key):
    sel = protocol.select_groups(b, t_key)
    assert set(sel) <= b
    assert len(sel) == min(t_key, len(b))
    assert list(sel) == sorted(set(sel))
    assert all(x < y for x in sel for y in b - set(sel))


# -- key generation ---------------------------------------------------------

def test_worked_tuple_example(monkeypatch):
    t_key, u = 2, 6
    draws = {t_key * u + 1: (1, 9, 10), t_key * u + 2: (11, 91, 56)}
    monkeypatch.setattr(protocol.crypto, "key_indices", lambda seed, k, m: draws[seed])
    node = _state(u, {5, 2}, t_key=t_key, k=3, m=100)
    assert [(e.tag_id, e.key_index) for e in node.ring] == [(2, 1), (2, 9), (2, 10), (5, 11), (5, 91), (5, 56)]


def test_uncovered_node_gets_empty_ring():
    node = _state(3, set())
    assert node.ring == [] and node.stage is Stage.KEYS_GENERATED


def test_ring_recomputes_from_root():
    node = _state(12, {3, 17, 40, 41, 60}, t_key=4, k=5, m=50)
    assert len(node.ring) == 4 * 5
    for slot, tag in enumerate(node.selected, start=1):
        idx = crypto.key_indices(4 * 12 + slot, 5, 50)
        entries = [e for e in node.ring if e.tag_id == tag]
        assert [e.key_index for e in entries] == list(idx)
        for e in entries:
            assert e.key == crypto.derive_key(crypto.group_key(tag, MATERIAL.root), e.key_index)


def test_stage_errors():
    node = _state(1, {2})
    with pytest.raises(InvalidStage):
        protocol.generate_ring(node, 5, 50, 4)
    with pytest.raises(InvalidStage):
        protocol.finish_broadcast(node, {3}, 4)
    fresh = protocol.predeploy(2, MATERIAL)
    with pytest.raises(InvalidStage):
        protocol.discovery_message(fresh)
    with pytest.raises(InvalidStage):
        protocol.discover_shared(fresh, protocol.discovery_message(node), 5, 50, 4)


def test_zeroization_is_structural():
    node = _state(9, {1, 2, 3, 50, 99})
    assert not node.root_key_present and node.checkpoints is None
    assert node.global_key_present
    secrets = {MATERIAL.root} | {crypto.group_key(j, MATERIAL.root) for j in range(1, 101)}
    assert not secrets & set(reachable_bytes(node))


@settings(max_examples=50)
@given(u=st.integers(0, 10**6), v=st.integers(0, 10**6), t_key=st.integers(1, 8))
def test_seed_ranges_are_disjoint(u, v, t_key):
    ru = {protocol.slot_seed(u, s, t_key) for s in range(1, t_key + 1)}
    assert ru == set(range(t_key * u + 1, t_key * (u + 1) + 1))
    if u != v:
        assert not ru & {protocol.slot_seed(v, s, t_key) for s in range(1, t_key + 1)}
    assert not ru & {protocol.slot_seed(v, s, t_key, rescued=True) for s in range(1, t_key + 1)}


def test_seeds_consumed_stay_in_range(toy_network):
    run, _ = toy_network
    t_key = run.config.t_key
    for s in run.states:
        assert all(t_key * s.node_id < seed <= t_key * (s.node_id + 1) for seed in s.slot_seeds)


# -- discovery ---------------------------------------------------------------

def test_discovery_message_format():
    node = _state(7, {1, 13}, t_key=4)
    msg = protocol.discovery_message(node)
    assert msg == (7, (1, 13), False)
    assert msg.encode() == "u:7;T:1,13"
    assert protocol.DiscoveryMessage.decode("u:7;T:1,13") == msg
    assert protocol.discovery_message(_state(8, set())).encode() == "u:8;T:"
    assert not any(isinstance(f, bytes) for f in msg)
    sizes = [len(protocol.DiscoveryMessage(5, tuple(range(10, 10 + n))).encode()) for n in range(1, 6)]
    assert len(set(np.diff(sizes))) == 1


def test_decode_rejects_unsorted():
    with pytest.raises(ValueError):
        protocol.DiscoveryMessage.decode("u:1;T:5,3")


def test_discovery_ranks_select_seeds(monkeypatch):
    t_key, u, v = 4, 3, 8
    node_u = _state(u, {1, 5, 9, 13}, t_key=t_key)
    node_v = _state(v, {1, 4, 13, 15}, t_key=t_key)
    assert node_v.slot_seeds[0] == t_key * v + 1 and node_v.slot_seeds[2] == t_key * v + 3
    asked = []
    real = protocol.index_set
    monkeypatch.setattr(protocol, "index_set", lambda seed, k, m: asked.append(seed) or real(seed, k, m))
    protocol.discover_shared(node_v, protocol.discovery_message(node_u), 5, 50, t_key)
    assert asked == [t_key * u + 1, t_key * u + 4]


def test_no_common_group_means_no_key():
    a, b = _state(1, {1, 2}), _state(2, {3, 4})
    assert protocol.discover_shared(a, protocol.discovery_message(b), 5, 50, 4) is None


def test_link_key_is_xor_of_shared_keys():
    a, b = _state(1, {1, 2}, k=50, m=50), _state(2, {1, 2}, k=50, m=50)
    link = protocol.discover_shared(a, protocol.discovery_message(b), 50, 50, 4)
    assert link.shared_tuples == a.tuples() & b.tuples()
    assert link.key == crypto.xor_keys(a.key_for(*t) for t in link.shared_tuples)


def test_discovery_equals_ring_intersection_full_scale():
    cfg = topology.SimConfig(tagged=1863, n_nodes=10000, t_key=2, keys_per_group=20, pool_m=1000)
    d = topology.deploy(cfg, 3)
    run = protocol.run_key_setup(cfg, d)
    rng = np.random.default_rng(0)
    picks = rng.choice(len(d.pairs), size=1000, replace=False)
    found = 0
    for u, v in d.pairs[picks].tolist():
        su, sv = run.states[u], run.states[v]
        link = protocol.discover_shared(sv, protocol.discovery_message(su), 20, 1000, 2)
        brute = su.tuples() & sv.tuples()
        assert (link.shared_tuples if link else frozenset()) == brute
        found += bool(brute)
    assert 0 < found < 1000


def test_discovery_symmetric(toy_network):
    run, _ = toy_network
    cfg = run.config
    for u, v in run.deployment.pairs.tolist():
        a = protocol.discover_shared(run.states[v], protocol.discovery_message(run.states[u]),
                                     cfg.keys_per_group, cfg.pool_m, cfg.t_key)
        b = protocol.discover_shared(run.states[u], protocol.discovery_message(run.states[v]),
                                     cfg.keys_per_group, cfg.pool_m, cfg.t_key)
        assert a == b


def test_shared_tuples_only_from_common_groups(toy_network):
    _, graph = toy_network
    run = toy_network[0]
    for (u, v), link in graph.links.items():
        common = set(run.states[u].selected) & set(run.states[v].selected)
        assert {t for t, _ in link.shared_tuples} <= common


def test_dumps(toy_network):
    run, _ = toy_network
    rows = protocol.ring_csv(run.states).splitlines()
    assert rows[0] == "node_id,tag_id,key_index,key_hex"
    assert len(rows) - 1 == sum(len(s.ring) for s in run.states)
    lines = protocol.transcript(run.states).splitlines()
    assert [protocol.DiscoveryMessage.decode(l).node_id for l in lines] == list(range(run.deployment.n_nodes))


# -- rescue -----------------------------------------------------------------

def _line_network():
    # node 0 tagged (tag 1), node 1 near it, node 2 only near node 1, node 3 alone
    pos = [[10, 10], [18, 10], [26, 10], [90, 90]]
    cfg = topology.SimConfig(side=100, n_nodes=4, radio_r=10, t_key=2, keys_per_group=5, pool_m=20, tagged=1)
    d = topology.Deployment.from_positions(pos, {0: 1}, 100, 10)
    return cfg, d


def test_rescue_installs_neighbour_group():
    cfg, d = _line_network()
    run = protocol.run_key_setup(cfg, d)
    assert run.states[2].ring == [] and run.states[3].ring == []
    rescued = protocol.rescue_uncovered(d, run.states, 5, 20, 2, run.material)
    assert rescued == [2]
    s = run.states[2]
    assert len(s.ring) == 5 and {e.tag_id for e in s.ring} == {1} and s.rescued
    for e in s.ring:
        assert e.key == crypto.derive_key(crypto.group_key(1, run.material.root), e.key_index)
    assert run.states[3].ring == []
    msg = protocol.discovery_message(s)
    assert msg.encode() == "u:2;T:1;R:1"
    assert protocol.DiscoveryMessage.decode(msg.encode()) == msg
    # discovery from the rescued node's message reproduces the ring intersection
    link = protocol.discover_shared(run.states[1], msg, 5, 20, 2)
    assert (link.shared_tuples if link else frozenset()) == s.tuples() & run.states[1].tuples()


def test_rescue_uses_smallest_neighbour_group():
    pos = [[10, 50], [30, 50], [20, 50]]
    d = topology.Deployment.from_positions(pos, {0: 2, 1: 1}, 100, 10)
    cfg = topology.SimConfig(side=100, n_nodes=3, radio_r=10, t_key=1, keys_per_group=3, pool_m=10, tagged=2)
    run = protocol.run_key_setup(cfg, d)
    # node 2 sits exactly r from both tagged nodes and hears both
    assert run.states[2].selected == (1,)
    pos = [[10, 50], [40, 50], [25, 58], [25, 50]]
    d = topology.Deployment.from_positions(pos, {0: 2, 1: 1}, 100, 10)
    run = protocol.run_key_setup(cfg.with_(n_nodes=4), d)
    uncovered = [s.node_id for s in run.states if not s.ring]
    protocol.rescue_uncovered(d, run.states, 3, 10, 1, run.material)
    for u in uncovered:
        nbr_groups = {t for w in d.adjacency[u] for t in run.states[w].selected if not run.states[w].rescued}
        if nbr_groups:
            assert run.states[u].selected == (min(nbr_groups),)


def test_rescue_requires_finished_keygen():
    cfg, d = _line_network()
    states = [protocol.predeploy(u, MATERIAL) for u in range(4)]
    with pytest.raises(InvalidStage):
        protocol.rescue_uncovered(d, states, 5, 20, 2, MATERIAL)


def test_rescue_never_lowers_global_connectivity():
    sparse = TOY.with_(tagged=12)
    for seed in range(10):
        run, graph = build_network(sparse, seed)
        before = analysis.global_connectivity(graph)
        protocol.rescue_uncovered(run.deployment, run.states, sparse.keys_per_group,
                                  sparse.pool_m, sparse.t_key, run.material)
        after = analysis.global_connectivity(analysis.build_key_graph(run.deployment, run.states, sparse))
        assert after >= before


# -- node addition ------------------------------------------------------------

def test_added_node_near_tag_joins_group(toy_network):
    run, _ = toy_network
    d = run.deployment
    src = d.node_of_tag(4)
    x, y = d.positions[src]
    pos = (min(x + 1, d.side), y)
    rings_before = [list(s.ring) for s in run.states]
    node, grown = protocol.add_node(d, pos, run.config, run.material)
    assert node.node_id == d.n_nodes and grown.n_nodes == d.n_nodes + 1
    assert 4 in node.received
    assert not node.root_key_present
    assert [s.ring for s in run.states] == rings_before


def test_added_node_in_dead_zone_has_empty_ring():
    cfg, d = _line_network()
    run = protocol.run_key_setup(cfg, d)
    node, _ = protocol.add_node(d, (60, 60), cfg, run.material)
    assert node.ring == [] and node.received == frozenset()


def test_added_node_outside_area_rejected(toy_network):
    run, _ = toy_network
    with pytest.raises(topology.ConfigError):
        protocol.add_node(run.deployment, (-1, 5), run.config, run.material)


def test_added_node_matches_full_resimulation(toy_network):
    run, _ = toy_network
    cfg, d = run.config, run.deployment
    pos = tuple(d.positions[d.node_of_tag(3)] + [2.0, 2.0])
    node, grown = protocol.add_node(d, pos, cfg, run.material)
    full = protocol.run_key_setup(cfg.with_(n_nodes=grown.n_nodes), grown, run.material)
    assert node.ring == full.states[-1].ring
    msg = protocol.discovery_message(node)
    for w in grown.adjacency[node.node_id]:
        old_view = protocol.discover_shared(run.states[w], msg, cfg.keys_per_group, cfg.pool_m, cfg.t_key)
        resim = protocol.discover_shared(full.states[w], msg, cfg.keys_per_group, cfg.pool_m, cfg.t_key)
        assert old_view == resim


# -- broadcast counting -------------------------------------------------------

def test_broadcast_counts(toy_config):
    d = topology.deploy(toy_config)
    assert protocol.count_setup_broadcasts(d, 1) == (d.n_tagged, d.n_nodes)
    assert protocol.count_setup_broadcasts(d, 2)[0] > d.n_tagged


def test_slot_key_memo_matches_fresh_rings(toy_config):
    d = topology.deploy(toy_config)
    memo = {}
    for k in (3, 8, 5, 10):
        cfg = toy_config.with_(keys_per_group=k)
        fresh = protocol.run_key_setup(cfg, d)
        reused = protocol.run_key_setup(cfg, d, slot_keys=memo)
        assert [s.ring for s in fresh.states] == [s.ring for s in reused.states]
