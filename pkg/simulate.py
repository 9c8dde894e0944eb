from __future__ import annotations

import argparse
from dataclasses import replace
import logging
import sys

from esdid.config import load_config
from esdid.sim.dgp import load_specs
from esdid.sim.grid import coverage_table, run_simulation
from main import setup_logging


logger = logging.getLogger(__name__)


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Coverage simulations for the event-study estimators")
    parser.add_argument("--spec", required=True, help="Path to a JSON grid of simulation specs")
    parser.add_argument("--reps", type=int, default=None, help="Replications per spec (default: config simulation.reps)")
    parser.add_argument("--seed", type=int, default=None, help="Seed for every spec (default: config simulation.seed)")
    parser.add_argument("--threads", type=int, default=None, help="Worker threads (default: ESDID_THREADS)")
    parser.add_argument("--output", default=None, help="Report CSV path (default: config simulation.report_path)")
    parser.add_argument("--only", default=None, help="Comma-separated spec names to run")
    parser.add_argument("--config", default="config.yaml", help="Path to YAML config")
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    args = parse_args(argv)
    config = load_config(args.config)
    if args.threads:
        config = replace(config, threads=max(1, args.threads))
    setup_logging(config.log_level)

    specs = load_specs(args.spec)
    if args.only:
        wanted = {name.strip() for name in args.only.split(",")}
        specs = [spec for spec in specs if spec.name in wanted]
    seed = args.seed if args.seed is not None else config.sim_seed
    specs = [replace(spec, seed=seed) for spec in specs]
    reps = args.reps if args.reps is not None else config.sim_reps
    if reps < 2:
        print(f"error: reps must be at least 2, got {reps}", file=sys.stderr)
        return 2

    reports = run_simulation(config, specs, reps, args.output or config.sim_report_path)
    print(coverage_table(reports).to_string(index=False))
    for report in reports:
        if "intra_cluster_correlation" in report.extras:
            print(f"{report.spec.name}: intra_cluster_correlation={report.extras['intra_cluster_correlation']:.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
