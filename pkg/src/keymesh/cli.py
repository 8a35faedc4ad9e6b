"""``keymesh`` command line."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from keymesh import harness
from keymesh.harness import ExperimentSpec, Scenario
from keymesh.topology import ConfigError, PlannerInfeasible, SimConfig


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v)


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="keymesh", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for scenario in Scenario:
        p = sub.add_parser(scenario.value.replace("_", "-"))
        p.set_defaults(scenario=scenario)
        p.add_argument("--config", help="JSON config path (default: bundled reference preset)")
        p.add_argument("--trials", type=int, default=1)
        p.add_argument("--seed", type=int, help="overrides rng_seed from the config")
        p.add_argument("--out", type=Path, help="CSV output path (default: stdout)")
        p.add_argument("--workers", type=int, default=1)
        if scenario in (Scenario.CAPTURE_SWEEP, Scenario.EG_COMPARE):
            p.add_argument("--x", type=_int_list, default=harness.DEFAULT_X,
                           help="comma-separated captured-node counts")
        if scenario is Scenario.CAPTURE_SWEEP:
            p.add_argument("--target-p", type=float, help="tune keys_per_group to this local connectivity")
        if scenario is Scenario.EG_COMPARE:
            p.add_argument("--p", type=_float_list, default=harness.DEFAULT_TARGET_P)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = SimConfig.load(args.config) if args.config else harness.load_preset("reference")
        if args.seed is not None:
            config = config.with_(rng_seed=args.seed)
        spec = ExperimentSpec(
            config=config,
            scenario=args.scenario,
            trials=args.trials,
            output_path=args.out,
            x_values=getattr(args, "x", harness.DEFAULT_X),
            target_p=getattr(args, "target_p", None),
            p_values=getattr(args, "p", harness.DEFAULT_TARGET_P),
            workers=args.workers,
        )
        records, text = harness.run(spec)
    except (ConfigError, PlannerInfeasible) as exc:
        print(f"keymesh: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"keymesh: I/O error: {exc}", file=sys.stderr)
        return 3
    if args.scenario is Scenario.PLAN:
        m = records[0].metrics
        print(f"T_c={m['T_c']} T_i={m['T_i']} T={m['T']}", file=sys.stderr if args.out is None else sys.stdout)
    if args.out is None:
        sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
