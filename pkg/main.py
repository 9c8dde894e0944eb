from __future__ import annotations

import argparse
from dataclasses import replace
import logging
import sys

from esdid.config import AppConfig, EstimationOptions, load_config
from esdid.errors import EsdidError, UsageError
from esdid.export import format_results_table
from esdid.pipeline import run_pipeline


logger = logging.getLogger(__name__)


def setup_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
    )


def _names(value: str | None) -> tuple[str, ...]:
    if not value:
        return ()
    return tuple(part.strip() for part in value.split(",") if part.strip())


def _integers(value: str, option: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in value.split(",") if part.strip())
    except ValueError as exc:
        raise UsageError(f"{option} expects comma-separated integers, got {value!r}") from exc


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Event-study difference-in-differences with heterogeneous effects")
    parser.add_argument("--input", required=True, help="Path to the long-format panel CSV")
    parser.add_argument("--config", default="config.yaml", help="Path to YAML config")
    parser.add_argument("--outcome", help="Outcome column (Y)")
    parser.add_argument("--group", help="Group column (G)")
    parser.add_argument("--time", help="Period column (T)")
    parser.add_argument("--treatment", help="Treatment column (D)")
    parser.add_argument("--weight", help="Row weight column")
    parser.add_argument("--effects", type=int, help="Number of event-study effects")
    parser.add_argument("--placebos", type=int, help="Number of placebos")
    parser.add_argument("--normalized", action="store_true", help="Report effects per unit of cumulative treatment change")
    parser.add_argument("--normalized-weights", action="store_true", help="Accepted; reports that it is not implemented")
    parser.add_argument("--effects-equal", help="all or comma-separated horizons to test for equality")
    parser.add_argument("--design", help="coverage,console|csv treatment-path report, e.g. 0.8,console")
    parser.add_argument("--controls", help="Comma-separated time-varying controls")
    parser.add_argument("--trends-nonparam", help="Comma-separated time-invariant supergroup columns")
    parser.add_argument("--trends-lin", action="store_true", help="Allow group-specific linear trends")
    parser.add_argument("--continuous", type=int, help="Polynomial order for a continuous period-one treatment")
    parser.add_argument("--cluster", help="Cluster column, nesting groups")
    parser.add_argument("--by", help="Estimate separately by levels of this group-level column")
    parser.add_argument("--predict-het", help="p1,p2[:h1,h2] predictors and optional horizons")
    parser.add_argument("--same-switchers", action="store_true")
    parser.add_argument("--same-switchers-pl", action="store_true")
    parser.add_argument("--switchers", choices=["both", "in", "out"], help="Restrict to one switcher type")
    parser.add_argument("--dont-drop-larger-lower", action="store_true")
    parser.add_argument("--drop-if-d-miss-before-first-switch", action="store_true")
    parser.add_argument("--more-granular-demeaning", action="store_true")
    parser.add_argument("--bootstrap", help="B,seed replications and seed")
    parser.add_argument("--save-influence", nargs="?", const="influence.csv", help="Write the influence table")
    parser.add_argument("--output-dir", help="Override the artifact directory")
    parser.add_argument("--format", choices=["csv", "json"], help="Results file format")
    parser.add_argument("--svg", action="store_true", help="Also write event_study.svg")
    return parser.parse_args(argv)


def build_options(args: argparse.Namespace, defaults: EstimationOptions) -> EstimationOptions:
    changes: dict = {}
    for field_name, value in (
        ("outcome", args.outcome),
        ("group", args.group),
        ("period", args.time),
        ("treatment", args.treatment),
        ("weight", args.weight),
        ("effects", args.effects),
        ("placebos", args.placebos),
        ("continuous", args.continuous),
        ("cluster", args.cluster),
        ("by", args.by),
        ("switchers", args.switchers),
    ):
        if value is not None:
            changes[field_name] = value
    for flag in (
        "normalized",
        "normalized_weights",
        "trends_lin",
        "same_switchers",
        "same_switchers_pl",
        "dont_drop_larger_lower",
        "drop_if_d_miss_before_first_switch",
        "more_granular_demeaning",
    ):
        if getattr(args, flag):
            changes[flag] = True
    if args.controls:
        changes["controls"] = _names(args.controls)
    if args.trends_nonparam:
        changes["trends_nonparam"] = _names(args.trends_nonparam)
    if args.design:
        coverage, _, target = args.design.partition(",")
        try:
            changes["design"] = (float(coverage), target.strip() or "console")
        except ValueError as exc:
            raise UsageError(f"design expects coverage,target, got {args.design!r}") from exc
    if args.predict_het:
        names, _, horizons = args.predict_het.partition(":")
        changes["predict_het"] = (_names(names), _integers(horizons, "predict_het") if horizons else None)
    if args.bootstrap:
        values = _integers(args.bootstrap, "bootstrap")
        if len(values) != 2:
            raise UsageError(f"bootstrap expects B,seed, got {args.bootstrap!r}")
        changes["bootstrap"] = values
    options = replace(defaults, **changes)
    if args.effects_equal:
        horizons = (
            tuple(range(1, options.effects + 1))
            if args.effects_equal.strip() == "all"
            else _integers(args.effects_equal, "effects_equal")
        )
        options = replace(options, effects_equal=horizons)
    return options.validate()


def apply_overrides(args: argparse.Namespace, config: AppConfig) -> AppConfig:
    changes: dict = {}
    if args.output_dir:
        changes["output_dir"] = args.output_dir
    if args.format:
        changes["results_format"] = args.format
    if args.svg:
        changes["write_svg"] = True
    if args.save_influence:
        changes["save_influence"] = args.save_influence
    return replace(config, **changes)


def _print_result(result, options: EstimationOptions) -> None:
    print(format_results_table(result))
    if result.design_paths is not None and options.design and options.design[1] == "console":
        print(result.design_paths.to_string(index=False))


def main(argv: list[str] | None = None) -> int:
    args = parse_args(argv)
    config = apply_overrides(args, load_config(args.config))
    setup_logging(config.log_level)

    try:
        options = build_options(args, config.estimation)
        outcome = run_pipeline(config, options, args.input)
    except EsdidError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code

    if outcome.result is not None:
        _print_result(outcome.result, options)
    for level in outcome.levels:
        print(f"by={level.level}")
        if level.result is None:
            print(f"no estimate: {level.diagnostic}")
        else:
            _print_result(level.result, options)
    logger.info("run_id=%s artifacts=%s", outcome.run_id, len(outcome.written))
    return 0


if __name__ == "__main__":
    sys.exit(main())
