import pytest

from keymesh import analysis, protocol, topology
from keymesh.topology import SimConfig

TOY = SimConfig(side=200.0, n_nodes=300, radio_r=30.0, hops=1, t_key=2,
                keys_per_group=10, pool_m=50, tagged=40, rng_seed=7)


def build_network(config: SimConfig, seed: int | None = None):
    cfg = config if seed is None else config.with_(rng_seed=seed)
    deployment = topology.deploy(cfg)
    run = protocol.run_key_setup(cfg, deployment)
    graph = analysis.build_key_graph(deployment, run.states, cfg)
    return run, graph


@pytest.fixture(scope="session")
def toy_config():
    return TOY


@pytest.fixture
def toy_network():
    return build_network(TOY)


def reachable_bytes(obj, seen=None):
    """Every bytes value reachable from obj through attributes and containers."""
    seen = set() if seen is None else seen
    if id(obj) in seen:
        return
    seen.add(id(obj))
    if isinstance(obj, (bytes, bytearray)):
        yield bytes(obj)
    elif isinstance(obj, dict):
        for k, v in obj.items():
            yield from reachable_bytes(k, seen)
            yield from reachable_bytes(v, seen)
    elif isinstance(obj, (list, tuple, set, frozenset)):
        for v in obj:
            yield from reachable_bytes(v, seen)
    elif hasattr(obj, "__dict__"):
        for v in vars(obj).values():
            yield from reachable_bytes(v, seen)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
