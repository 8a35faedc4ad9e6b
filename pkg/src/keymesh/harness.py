"""Seeded multi-trial experiment scenarios with CSV output.

Trial ``i`` of a run uses seed ``rng_seed + i``. Every emitted number is a
function of the config and that seed, so reruns produce identical bytes.
"""

from __future__ import annotations

import enum
import logging
import math
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from keymesh import analysis, crypto, protocol, topology
from keymesh.topology import ConfigError, SimConfig

log = logging.getLogger(__name__)

METRICS_HEADER = "metric,t_key,k,keys_total,value,stderr,seed_count"
CAPTURE_HEADER = "x,empirical,analytic_bound,eligible_links,empirical_stderr,eg_bound"
EG_HEADER = "p,x,L,scheme_S,scheme_bound,eg_S,eg_bound"

TABLE1_CELLS = [(40, 2), (40, 4), (60, 2), (60, 4), (100, 2), (100, 4)]
DEFAULT_X = (0, 10, 50, 100, 200, 500)
DEFAULT_TARGET_P = (0.33, 0.50)


class Scenario(str, enum.Enum):
    PLAN = "plan"
    SIMULATE = "simulate"
    TABLE1 = "table1"
    CAPTURE_SWEEP = "capture_sweep"
    EG_COMPARE = "eg_compare"
    RESCUE_EVAL = "rescue_eval"
    BROADCAST_COUNT = "broadcast_count"


@dataclass(frozen=True)
class ExperimentSpec:
    config: SimConfig
    scenario: Scenario
    trials: int = 1
    output_path: Path | None = None
    x_values: tuple[int, ...] = DEFAULT_X
    target_p: float | None = None
    p_values: tuple[float, ...] = DEFAULT_TARGET_P
    workers: int = 1

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.scenario is Scenario.CAPTURE_SWEEP and not self.x_values:
            raise ConfigError("capture_sweep needs at least one x value")
        if any(x < 0 for x in self.x_values):
            raise ConfigError("x values must be >= 0")

    @property
    def seeds(self) -> list[int]:
        return [self.config.rng_seed + i for i in range(self.trials)]


@dataclass
class RunRecord:
    scenario: str
    config_hash: str
    rng_seed: int
    metrics: dict[str, float] = field(default_factory=dict)
    duration_s: float = 0.0


def load_preset(name: str) -> SimConfig:
    path = resources.files("keymesh") / "presets" / f"{name}.json"
    return SimConfig.load(path)


# --------------------------------------------------------------------------
# helpers


def _fmt(value) -> str:
    if isinstance(value, float):
        return "nan" if math.isnan(value) else repr(value)
    return str(value)


def _csv(header: str, rows: Iterable[Sequence]) -> str:
    return header + "\n" + "".join(",".join(_fmt(v) for v in row) + "\n" for row in rows)


def _mean_stderr(values: Sequence[float]) -> tuple[float, float]:
    mean = math.fsum(values) / len(values)
    if len(values) < 2:
        return mean, float("nan")
    return mean, statistics.stdev(values) / math.sqrt(len(values))


def _map(fn: Callable, items: Sequence, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _metric_rows(config: SimConfig, per_trial: list[dict[str, float]], names: Iterable[str]):
    for name in names:
        mean, err = _mean_stderr([t[name] for t in per_trial])
        yield (name, config.t_key, config.keys_per_group, config.ring_size, mean, err, len(per_trial))


def _network(config: SimConfig, seed: int, deployment=None, flooded=None):
    cfg = config.with_(rng_seed=seed)
    deployment = deployment if deployment is not None else topology.deploy(cfg, seed)
    run = protocol.run_key_setup(cfg, deployment, flooded=flooded)
    graph = analysis.build_key_graph(deployment, run.states, cfg)
    return run, graph


# --------------------------------------------------------------------------
# scenarios


def plan(spec: ExperimentSpec) -> tuple[list[RunRecord], str]:
    cfg = spec.config
    t_c = topology.plan_coverage(cfg)
    t_i = topology.plan_intergroup(cfg)
    t = max(t_c, t_i)
    metrics = {"T_c": t_c, "T_i": t_i, "T": t}
    rows = [(k, cfg.t_key, cfg.keys_per_group, cfg.ring_size, v, 0.0, 0) for k, v in metrics.items()]
    rec = RunRecord(Scenario.PLAN.value, cfg.digest(), cfg.rng_seed, metrics)
    return [rec], _csv(METRICS_HEADER, rows)


@protocol.gc_paused()
def _simulate_trial(args) -> dict[str, float]:
    config, seed = args
    run, graph = _network(config, seed)
    stats = topology.coverage_stats(run.config, run.deployment, run.flooded)
    ok, n_groups = analysis.group_graph_connected(run.states)
    return {
        "local_connectivity": analysis.local_connectivity(graph, run.deployment),
        "global_connectivity": analysis.global_connectivity(graph),
        "uncovered_nodes": float(stats.uncovered_count),
        "group_graph_components": float(n_groups),
        "group_graph_connected": float(ok),
        "setup_transmissions": float(run.flooded.transmissions),
    }


SIMULATE_METRICS = ("local_connectivity", "global_connectivity", "uncovered_nodes",
                    "group_graph_components", "group_graph_connected", "setup_transmissions")


def simulate(spec: ExperimentSpec) -> tuple[list[RunRecord], str]:
    cfg = spec.config.with_(tagged=spec.config.resolved_tagged())
    results = _map(_simulate_trial, [(cfg, s) for s in spec.seeds], spec.workers)
    records = [RunRecord(Scenario.SIMULATE.value, cfg.digest(), s, r) for s, r in zip(spec.seeds, results)]
    return records, _csv(METRICS_HEADER, _metric_rows(cfg, results, SIMULATE_METRICS))


@protocol.gc_paused()
def _table1_trial(args) -> list[dict[str, float]]:
    """All six cells on one deployment (common random numbers across cells).

    Cells sharing t_key are run in ascending k so derived keys carry over.
    """
    config, seed = args
    deployment = topology.deploy(config, seed)
    material = protocol.KeyMaterial.from_seed(seed, deployment.n_tagged, config.checkpoint_stride)
    flooded = topology.flood(deployment, config.hops, material.global_key)
    out: dict[tuple[int, int], dict[str, float]] = {}
    for t_key in sorted({t for _, t in TABLE1_CELLS}):
        slot_keys: dict = {}
        for keys_total in sorted(kt for kt, t in TABLE1_CELLS if t == t_key):
            cfg = config.with_(t_key=t_key, keys_per_group=keys_total // t_key, rng_seed=seed)
            run = protocol.run_key_setup(cfg, deployment, material, flooded, slot_keys)
            graph = analysis.build_key_graph(deployment, run.states, cfg)
            out[(keys_total, t_key)] = {
                "local_connectivity": analysis.local_connectivity(graph, deployment),
                "global_connectivity": analysis.global_connectivity(graph),
            }
        slot_keys.clear()
    return [out[cell] for cell in TABLE1_CELLS]


def table1(spec: ExperimentSpec) -> tuple[list[RunRecord], str]:
    base = spec.config.with_(tagged=spec.config.resolved_tagged())
    per_seed = _map(_table1_trial, [(base, s) for s in spec.seeds], spec.workers)
    rows = []
    records = []
    for cell, (keys_total, t_key) in enumerate(TABLE1_CELLS):
        cfg = base.with_(t_key=t_key, keys_per_group=keys_total // t_key)
        trials = [r[cell] for r in per_seed]
        rows.extend(_metric_rows(cfg, trials, ("local_connectivity", "global_connectivity")))
        records.extend(RunRecord(Scenario.TABLE1.value, cfg.digest(), s, t) for s, t in zip(spec.seeds, trials))
    return records, _csv(METRICS_HEADER, rows)


def table1_summary(csv_text: str) -> dict[tuple[int, int], dict[str, tuple[float, float]]]:
    """Parse a table1 CSV into {(keys_total, t_key): {metric: (mean, stderr)}}."""
    out: dict = {}
    for line in csv_text.strip().splitlines()[1:]:
        metric, t_key, _k, keys_total, value, err, _n = line.split(",")
        out.setdefault((int(keys_total), int(t_key)), {})[metric] = (float(value), float(err))
    return out


def _first_shared_k(deployment, flooded, t_key: int, m: int, k_max: int) -> np.ndarray:
    """Per radio pair, the smallest k at which the two rings share a key.

    Rings are nested in k (index i depends only on seed and i), so a pair
    that shares at k shares at every larger k. Pairs that never share up to
    ``k_max`` get ``k_max + 1``.
    """
    sel = [protocol.select_groups(b, t_key) for b in flooded.received]
    row_of: dict[int, int] = {}
    ra, rb, owner = [], [], []
    for pid, (u, v) in enumerate(deployment.pairs.tolist()):
        sv = sel[v]
        for a, tag in enumerate(sel[u], start=1):
            if tag in sv:
                sa, sb = t_key * u + a, t_key * v + sv.index(tag) + 1
                ra.append(row_of.setdefault(sa, len(row_of)))
                rb.append(row_of.setdefault(sb, len(row_of)))
                owner.append(pid)
    out = np.full(len(deployment.pairs), k_max + 1, dtype=np.int64)
    if not row_of:
        return out
    # first[row, idx - 1] = 0-based draw position of idx, k_max if never drawn
    first = np.full((len(row_of), m), k_max, dtype=np.int16 if k_max < 2**15 else np.int32)
    for seed, row in row_of.items():
        seq = np.asarray(crypto.key_indices(seed, k_max, m)) - 1
        first[row, seq[::-1]] = np.arange(k_max)[::-1]
    ra, rb, owner = np.asarray(ra), np.asarray(rb), np.asarray(owner)
    chunk = max(1, 2**22 // m)
    for lo in range(0, len(ra), chunk):
        sl = slice(lo, lo + chunk)
        k_pair = np.maximum(first[ra[sl]], first[rb[sl]]).min(axis=1).astype(np.int64) + 1
        np.minimum.at(out, owner[sl], k_pair)
    return out


def local_connectivity_curve(deployment, flooded, t_key: int, m: int, k_max: int) -> np.ndarray:
    """``curve[k]`` is the local connectivity with k keys per group, k = 0..k_max."""
    if len(deployment.pairs) == 0:
        raise analysis.UndefinedMetric("no radio-neighbour pairs")
    counts = np.bincount(_first_shared_k(deployment, flooded, t_key, m, k_max), minlength=k_max + 2)
    return np.cumsum(counts[:k_max + 1]) / len(deployment.pairs)


def match_keys_per_group(config: SimConfig, target_p: float, deployment=None, flooded=None) -> tuple[int, float]:
    """Smallest k whose local connectivity is closest to ``target_p``.

    Measured on a single deployment. Raises ConfigError naming the reachable
    range when the target lies outside what k in [1, M] can give.
    """
    deployment = deployment if deployment is not None else topology.deploy(config)
    flooded = flooded if flooded is not None else topology.flood(deployment, config.hops)
    m, t_key = config.pool_m, config.t_key
    k_max = min(m, 64)
    while True:
        curve = local_connectivity_curve(deployment, flooded, t_key, m, k_max)
        if curve[-1] >= target_p or k_max == m:
            break
        k_max = min(m, 4 * k_max)
    p_lo, p_hi = curve[1], curve[-1]
    if not p_lo <= target_p <= p_hi:
        raise ConfigError(
            f"target p={target_p} unattainable at t_key={t_key}, M={m}: "
            f"achievable range is [{p_lo:.4f}, {p_hi:.4f}]"
        )
    k = int(np.argmin(np.abs(curve[1:] - target_p))) + 1
    return k, float(curve[k])


@dataclass
class CaptureSweep:
    config: SimConfig
    achieved_p: float
    rows: list[tuple]
    reports: dict[int, list[analysis.CaptureReport]]


@protocol.gc_paused()
def run_capture_sweep(config: SimConfig, x_values: Sequence[int], trials: int,
                      target_p: float | None = None) -> CaptureSweep:
    """Capture sweep on the network seeded by ``config.rng_seed``.

    Trial i draws the captured set with seed rng_seed + i. With ``target_p``
    keys_per_group is first tuned to hit that local connectivity.
    """
    cfg = config.with_(tagged=config.resolved_tagged())
    deployment = topology.deploy(cfg)
    material = protocol.KeyMaterial.from_seed(cfg.rng_seed, deployment.n_tagged, cfg.checkpoint_stride)
    flooded = topology.flood(deployment, cfg.hops, material.global_key)
    if target_p is not None:
        k, _ = match_keys_per_group(cfg, target_p, deployment, flooded)
        cfg = cfg.with_(keys_per_group=k)
    run = protocol.run_key_setup(cfg, deployment, material, flooded)
    graph = analysis.build_key_graph(deployment, run.states, cfg)
    p = analysis.local_connectivity(graph, deployment)
    L = cfg.ring_size
    eg_S = analysis.eg_pool_size(p, L) if 0 < p < 1 else None
    rows = []
    reports = {}
    for x in x_values:
        reps = [analysis.simulate_capture(graph, run.states, x, cfg.rng_seed + i, cfg, deployment.n_tagged)
                for i in range(trials)]
        reports[x] = reps
        emp, err = _mean_stderr([r.empirical_fraction for r in reps])
        eligible = math.fsum(r.eligible_links for r in reps) / trials
        eg = analysis.resilience_bound(L, eg_S, x) if eg_S else float("nan")
        rows.append((x, emp, reps[0].analytic_bound, eligible, err, eg))
    return CaptureSweep(cfg, p, rows, reports)


def capture_sweep(spec: ExperimentSpec) -> tuple[list[RunRecord], str]:
    sweep = run_capture_sweep(spec.config, spec.x_values, spec.trials, spec.target_p)
    cfg = sweep.config
    records = [RunRecord(Scenario.CAPTURE_SWEEP.value, cfg.digest(), cfg.rng_seed,
                         {"x": row[0], "empirical": row[1], "analytic_bound": row[2],
                          "local_connectivity": sweep.achieved_p})
               for row in sweep.rows]
    return records, _csv(CAPTURE_HEADER, sweep.rows)


def eg_compare_rows(L: int, scheme_S: int, p_values: Iterable[float], x_values: Iterable[int]):
    for p in p_values:
        eg_S = analysis.eg_pool_size(p, L)
        for x in x_values:
            yield (p, x, L, scheme_S, analysis.resilience_bound(L, scheme_S, x),
                   eg_S, analysis.resilience_bound(L, eg_S, x))


def eg_compare(spec: ExperimentSpec) -> tuple[list[RunRecord], str]:
    cfg = spec.config
    S = cfg.resolved_tagged() * cfg.pool_m
    rows = list(eg_compare_rows(cfg.ring_size, S, spec.p_values, spec.x_values))
    wins = all(r[4] < r[6] for r in rows if r[1] > 0)
    rec = RunRecord(Scenario.EG_COMPARE.value, cfg.digest(), cfg.rng_seed, {"scheme_below_eg": float(wins)})
    return [rec], _csv(EG_HEADER, rows)


@protocol.gc_paused()
def _rescue_trial(args) -> dict[str, float]:
    config, seed = args
    run, graph = _network(config, seed)
    before = analysis.global_connectivity(graph)
    cfg = run.config
    rescued = protocol.rescue_uncovered(run.deployment, run.states, cfg.keys_per_group,
                                        cfg.pool_m, cfg.t_key, run.material)
    after_graph = analysis.build_key_graph(run.deployment, run.states, cfg)
    return {
        "global_before_rescue": before,
        "global_after_rescue": analysis.global_connectivity(after_graph),
        "rescued_nodes": float(len(rescued)),
        "empty_rings_before": float(sum(1 for s in run.states if not s.ring) + len(rescued)),
    }


def rescue_eval(spec: ExperimentSpec) -> tuple[list[RunRecord], str]:
    cfg = spec.config.with_(tagged=spec.config.resolved_tagged())
    results = _map(_rescue_trial, [(cfg, s) for s in spec.seeds], spec.workers)
    records = [RunRecord(Scenario.RESCUE_EVAL.value, cfg.digest(), s, r) for s, r in zip(spec.seeds, results)]
    names = ("global_before_rescue", "global_after_rescue", "rescued_nodes", "empty_rings_before")
    return records, _csv(METRICS_HEADER, _metric_rows(cfg, results, names))


def broadcast_count(spec: ExperimentSpec) -> tuple[list[RunRecord], str]:
    cfg = spec.config.with_(tagged=spec.config.resolved_tagged())
    results = []
    for seed in spec.seeds:
        scheme, leap = protocol.count_setup_broadcasts(topology.deploy(cfg, seed), cfg.hops)
        results.append({"scheme_transmissions": float(scheme), "leap_proxy_transmissions": float(leap),
                        "transmission_ratio": scheme / leap})
    records = [RunRecord(Scenario.BROADCAST_COUNT.value, cfg.digest(), s, r) for s, r in zip(spec.seeds, results)]
    names = ("scheme_transmissions", "leap_proxy_transmissions", "transmission_ratio")
    return records, _csv(METRICS_HEADER, _metric_rows(cfg, results, names))


SCENARIOS = {
    Scenario.PLAN: plan,
    Scenario.SIMULATE: simulate,
    Scenario.TABLE1: table1,
    Scenario.CAPTURE_SWEEP: capture_sweep,
    Scenario.EG_COMPARE: eg_compare,
    Scenario.RESCUE_EVAL: rescue_eval,
    Scenario.BROADCAST_COUNT: broadcast_count,
}


def run(spec: ExperimentSpec) -> tuple[list[RunRecord], str]:
    """Execute a scenario; writes the CSV to ``spec.output_path`` when set."""
    start = time.perf_counter()
    records, text = SCENARIOS[spec.scenario](spec)
    elapsed = time.perf_counter() - start
    for rec in records:
        rec.duration_s = elapsed
    if spec.output_path is not None:
        Path(spec.output_path).write_text(text)
    log.info("%s: %d records in %.2fs", spec.scenario.value, len(records), elapsed)
    return records, text
