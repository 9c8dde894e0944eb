from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
import logging
import math
from pathlib import Path

import numpy as np
import pandas as pd
from sqlalchemy.orm import Session

from esdid.config import AppConfig, EstimationOptions
from esdid.controls import (
    ResidualizationFit,
    adjusted_differences,
    adjusted_variance,
    continuous_mode,
    control_linearization,
    fit_all,
)
from esdid.db import (
    create_db_engine,
    init_db,
    new_run_id,
    record_estimates,
    record_run_finished,
    record_run_started,
)
from esdid.design import (
    GroupSchedules,
    apply_same_switchers,
    check_design_restriction_1,
    classify,
    compute_horizons_and_masses,
    drop_no_first_stage,
    enforce_design_restriction_2,
    report_design_paths,
    truncate_effects,
)
from esdid.errors import EstimationError
from esdid.export import write_artifacts, write_level_artifacts
from esdid.estimators import (
    AVERAGE_TOTAL,
    DoseDeltas,
    EffectEstimate,
    HorizonAggregate,
    aggregate_effects,
    average_total_effect,
    cumulative_did,
    did_gl,
    effect_samples,
    normalize,
    placebo_samples,
    trends_lin_transform,
)
from esdid.heterogeneity import HetReport, LevelOutcome, estimate_by, group_predictors, predict_het
from esdid.horizons import EFFECT, PLACEBO, HorizonSample, long_difference
from esdid.inference import (
    BootstrapResult,
    WaldResult,
    bootstrap,
    confidence_interval,
    effects_equal_test,
    placebo_joint_test,
)
from esdid.influence import (
    InfluenceTable,
    SideRows,
    build_demeaning,
    build_influence,
    log_linearization_gaps,
    normalized_variance,
    side_rows,
    sides_for,
    total_effect_rows,
    variance,
)
from esdid.ingest import AuditLog, apply_missing_treatment_rules, build_panel, collapse, flag_missing_controls
from esdid.ingest import read_panel_csv, rebase_periods, standardize_rows


logger = logging.getLogger(__name__)

NORMALIZED_EFFECT = "normalized_effect"
NORMALIZED_PLACEBO = "normalized_placebo"
NORMALIZED_WEIGHTS_NOTE = "normalized_weights is not implemented: lag weights of normalized effects are not reported"
ESTIMANDS_NOTE = (
    "effect_l targets the average actual-versus-status-quo effect of having been exposed to a "
    "weakly higher (lower) treatment for l periods; normalized_effect_l divides it by the average "
    "cumulative treatment change"
)


@dataclass
class EstimationResult:
    estimates: list[EffectEstimate]
    effect_aggregates: list[HorizonAggregate]
    placebo_aggregates: list[HorizonAggregate]
    influence: InfluenceTable
    schedules: GroupSchedules
    group_effects: pd.DataFrame
    doses: DoseDeltas | None = None
    tests: dict[str, WaldResult] = field(default_factory=dict)
    fits: dict[int, ResidualizationFit] = field(default_factory=dict)
    design_paths: pd.DataFrame | None = None
    metadata: dict = field(default_factory=dict)
    bootstrap: BootstrapResult | None = None
    het: HetReport | None = None

    def points(self) -> dict[str, float]:
        return {estimate.label: estimate.point for estimate in self.estimates}

    def get(self, label: str) -> EffectEstimate:
        for estimate in self.estimates:
            if estimate.label == label:
                return estimate
        raise KeyError(label)

    def to_frame(self) -> pd.DataFrame:
        records = [estimate.to_dict() for estimate in self.estimates]
        columns = ["label", "kind", "horizon", "point", "se", "variance", "ci_low", "ci_high", "n_weight", "switchers"]
        return pd.DataFrame(records, columns=columns)


def prepare_frame(
    frame: pd.DataFrame,
    options: EstimationOptions,
    predictors: tuple[str, ...] = (),
    standardized: bool = False,
) -> tuple[pd.DataFrame, AuditLog]:
    """Raw rows to rebased, rule-applied (group, period) cells plus the audit trail."""
    rows = frame if standardized else standardize_rows(frame, options, predictors)
    cells = collapse(rows, weight_column_present=bool(options.weight), controls=options.controls)
    cells = rebase_periods(cells)
    cells, audit = apply_missing_treatment_rules(cells, options.missing_policy, options.tolerance)
    flag_missing_controls(cells, options.controls, audit)
    return cells, audit


def load_cells(path: str, options: EstimationOptions, predictors: tuple[str, ...] = ()) -> tuple[pd.DataFrame, AuditLog]:
    rows = read_panel_csv(path, options, predictors)
    return prepare_frame(rows, options, predictors, standardized=True)


def _cap_placebos(options: EstimationOptions, effects: int) -> int:
    cap = effects - 1 if options.trends_lin else effects
    placebos = min(options.placebos, max(cap, 0))
    if placebos < options.placebos:
        logger.warning("placebos_requested=%s placebos_estimable=%s truncated", options.placebos, placebos)
    return placebos


def _select_samples(
    diff_for,
    weight: np.ndarray,
    schedules: GroupSchedules,
    effects: int,
    placebos: int,
    same_switchers: bool,
    same_switchers_pl: bool,
) -> tuple[list[HorizonSample], list[HorizonSample]]:
    effect_list = effect_samples(diff_for, weight, schedules, effects)
    eligible = None
    if same_switchers:
        eligible = apply_same_switchers(effect_list)
        effect_list = effect_samples(diff_for, weight, schedules, effects, eligible)
        logger.info("same_switchers kept=%s", int(eligible.sum()))
    placebo_list = placebo_samples(diff_for, weight, schedules, effect_list, placebos, eligible)
    if same_switchers_pl and placebo_list:
        empty = [sample.horizon for sample in placebo_list if not sample.switchers.any()]
        if empty:
            placebos = empty[0] - 1
            logger.warning("same_switchers_pl placebo_horizon=%s has no switcher placebos_kept=%s", empty[0], placebos)
            placebo_list = placebo_list[:placebos]
    if same_switchers_pl and placebo_list:
        keep = apply_same_switchers(effect_list, placebo_list)
        placebo_list = placebo_samples(diff_for, weight, schedules, effect_list, placebos, keep)
        logger.info("same_switchers_pl kept=%s", int(keep.sum()))
    return effect_list, placebo_list


def _cumulate_rows(columns: list[tuple]) -> list[tuple]:
    """Running sums over horizons of every influence array."""
    if not columns:
        return columns
    stacked = [np.cumsum(np.column_stack(part), axis=1) for part in zip(*columns)]
    return [tuple(array[:, j] for array in stacked) for j in range(len(columns))]


def _side_columns(rows: SideRows) -> tuple:
    return rows.combined, rows.combined_var, rows.plus, rows.minus, rows.plus_var, rows.minus_var


def _group_effects(
    samples: list[HorizonSample],
    weight: np.ndarray,
    schedules: GroupSchedules,
) -> pd.DataFrame:
    frames = []
    for sample in samples:
        values = did_gl(sample, weight, schedules)
        rows = np.flatnonzero(sample.switchers)
        cell_weight = np.where(sample.switcher, weight, 0.0).sum(axis=1)
        frames.append(
            pd.DataFrame(
                {
                    "group": np.asarray(schedules.groups)[rows],
                    "horizon": sample.horizon,
                    "effect": values[rows],
                    "weight": cell_weight[rows],
                    "direction": schedules.direction[rows],
                }
            )
        )
    if not frames:
        return pd.DataFrame(columns=["group", "horizon", "effect", "weight", "direction"])
    return pd.concat(frames, ignore_index=True)


def estimate(cells: pd.DataFrame, options: EstimationOptions) -> EstimationResult:
    """Full point and analytic-variance estimation on prepared cells."""
    tolerance = options.tolerance
    continuous = options.continuous is not None
    panel = build_panel(
        cells,
        options.controls,
        cluster=bool(options.cluster),
        supergroup=bool(options.trends_nonparam),
    )
    schedules = classify(panel, tolerance, continuous)
    panel = enforce_design_restriction_2(panel, schedules, options.dont_drop_larger_lower, tolerance)
    panel = drop_no_first_stage(panel, schedules, tolerance)
    schedules = classify(panel, tolerance, continuous)
    if not (schedules.direction != 0).any():
        raise EstimationError("no switcher: every group keeps its period-one treatment")
    if not continuous:
        check_design_restriction_1(schedules)

    if options.trends_lin:
        panel = trends_lin_transform(panel)
    schedules, _, l_u, l_a = compute_horizons_and_masses(panel, schedules)
    effects = truncate_effects(options.effects, l_u, l_a, options.switchers)
    placebos = _cap_placebos(options, effects)

    if continuous:
        panel = continuous_mode(panel, schedules, options.continuous)
    with_controls = panel.controls.shape[2] > 0
    fits: dict[int, ResidualizationFit] = {}
    if with_controls:
        fits = fit_all(panel, schedules)
        diff_for = adjusted_differences(panel, schedules, fits)
    else:
        outcome = panel.outcome

        def diff_for(kind: str, horizon: int) -> np.ndarray:
            return long_difference(outcome, horizon, kind)

    weight = panel.weight
    same = options.same_switchers or options.trends_lin
    same_pl = options.same_switchers_pl or options.trends_lin
    effect_list, placebo_list = _select_samples(diff_for, weight, schedules, effects, placebos, same, same_pl)
    effect_aggs = aggregate_effects(effect_list, weight, schedules, options.switchers)
    placebo_aggs = aggregate_effects(placebo_list, weight, schedules, options.switchers) if placebo_list else []

    effect_points = cumulative_did(effect_aggs) if options.trends_lin else np.array([a.did for a in effect_aggs])
    placebo_points = (
        cumulative_did(placebo_aggs) if options.trends_lin else np.array([a.did for a in placebo_aggs])
    )

    n_groups = panel.n_groups
    units = panel.cluster if panel.cluster is not None else np.arange(n_groups)
    sets = build_demeaning(schedules, units, options.more_granular_demeaning, continuous)
    if with_controls:
        linearization = control_linearization(panel, schedules, fits, units)

        def rows_for(sample: HorizonSample, aggregate: HorizonAggregate) -> SideRows:
            return adjusted_variance(sample, weight, schedules, sets, linearization, panel.controls, sides_for(aggregate))

    else:

        def rows_for(sample: HorizonSample, aggregate: HorizonAggregate) -> SideRows:
            return side_rows(sample, weight, schedules, sets, sides_for(aggregate))

    effect_rows = [rows_for(s, a) for s, a in zip(effect_list, effect_aggs)]
    placebo_rows = [rows_for(s, a) for s, a in zip(placebo_list, placebo_aggs)]
    effect_columns = [_side_columns(r) for r in effect_rows]
    placebo_columns = [_side_columns(r) for r in placebo_rows]
    if options.trends_lin:
        effect_columns = _cumulate_rows(effect_columns)
        placebo_columns = _cumulate_rows(placebo_columns)

    columns: dict[str, tuple] = {}
    points: dict[str, float] = {}
    counts: dict[str, tuple[float, int]] = {}
    for aggregate, point, column in zip(effect_aggs, effect_points, effect_columns):
        columns[aggregate.label] = column
        points[aggregate.label] = float(point)
        counts[aggregate.label] = (aggregate.n_weight, aggregate.switchers)
    for aggregate, point, column in zip(placebo_aggs, placebo_points, placebo_columns):
        columns[aggregate.label] = column
        points[aggregate.label] = float(point)
        counts[aggregate.label] = (aggregate.n_weight, aggregate.switchers)

    doses = None
    if not options.trends_lin:
        doses = average_total_effect(effect_aggs)
        columns[AVERAGE_TOTAL] = total_effect_rows(effect_rows, doses)
        points[AVERAGE_TOTAL] = doses.delta
        any_switcher = np.logical_or.reduce([s.switchers for s in effect_list])
        counts[AVERAGE_TOTAL] = (float(sum(a.n_weight for a in effect_aggs)), int(any_switcher.sum()))

    normalized_doses: dict[str, float] = {}
    if options.normalized:
        for kind, aggs, pts, target in (
            (EFFECT, effect_aggs, effect_points, NORMALIZED_EFFECT),
            (PLACEBO, placebo_aggs, placebo_points, NORMALIZED_PLACEBO),
        ):
            if not aggs:
                continue
            values, dose_abs = normalize(aggs, pts)
            for aggregate, value, dose in zip(aggs, values, dose_abs):
                label = f"{target}_{aggregate.horizon}"
                scale = dose if dose and not math.isnan(dose) else math.nan
                columns[label] = tuple(array / scale for array in columns[aggregate.label])
                points[label] = float(value)
                counts[label] = counts[aggregate.label]
                normalized_doses[label] = float(dose)

    influence = build_influence(panel.groups, units, columns)
    log_linearization_gaps(points, influence)

    variances: dict[str, float] = {}
    for label in columns:
        if label in normalized_doses:
            source = label.replace(NORMALIZED_EFFECT, EFFECT).replace(NORMALIZED_PLACEBO, PLACEBO)
            variances[label] = normalized_variance(variances[source], normalized_doses[label])
        else:
            variances[label] = variance(influence.rows_var[:, influence.column(label)], units, n_groups)
        if math.isnan(points[label]):
            variances[label] = math.nan

    estimates = []
    for label, point in points.items():
        kind, horizon = (AVERAGE_TOTAL, 0) if label == AVERAGE_TOTAL else (label.rsplit("_", 1)[0], int(label.rsplit("_", 1)[1]))
        var = variances[label]
        low, high = (math.nan, math.nan) if math.isnan(var) else confidence_interval(point, var, options.ci_level)
        n_weight, switchers = counts[label]
        estimates.append(EffectEstimate(kind, horizon, point, var, n_weight, switchers, low, high))

    tests: dict[str, WaldResult] = {}
    if options.effects_equal is not None:
        selected = [h for h in options.effects_equal if h <= effects and not math.isnan(points[f"{EFFECT}_{h}"])]
        if len(selected) >= 2:
            labels = [f"{EFFECT}_{h}" for h in selected]
            idx = [influence.column(label) for label in labels]
            tests["effects_equal"] = effects_equal_test(
                np.array([points[label] for label in labels]), influence.rows_var[:, idx], units, n_groups
            )
        else:
            logger.warning("effects_equal skipped estimable_horizons=%s", selected)
    placebo_labels = [a.label for a in placebo_aggs if not math.isnan(points[a.label])]
    if placebo_labels:
        idx = [influence.column(label) for label in placebo_labels]
        tests["placebo_joint"] = placebo_joint_test(
            np.array([points[label] for label in placebo_labels]), influence.rows_var[:, idx], units, n_groups
        )

    design_paths = None
    if options.design is not None:
        coverage, _ = options.design
        design_paths = report_design_paths(schedules, effect_list[-1], weight, coverage)

    metadata = {
        "n_groups": n_groups,
        "n_periods": panel.n_periods,
        "period_labels": list(panel.period_labels),
        "effects_requested": options.effects,
        "effects_estimated": effects,
        "placebos_estimated": len(placebo_aggs),
        "L_u": l_u,
        "L_a": l_a,
        "switchers_in": int(((schedules.direction == 1) & ~schedules.dropped).sum()),
        "switchers_out": int(((schedules.direction == -1) & ~schedules.dropped).sum()),
        "clusters": int(units.max()) + 1,
        "one_sided": {
            a.label: {"did_plus": a.did_plus, "did_minus": a.did_minus, "N_plus": a.n_plus, "N_minus": a.n_minus}
            for a in effect_aggs + placebo_aggs
        },
        "estimands": ESTIMANDS_NOTE,
        "se_method": "analytic",
    }
    if doses is not None:
        metadata.update(delta_plus=doses.delta_plus, delta_minus=doses.delta_minus, w_plus=doses.w_plus)
    if normalized_doses:
        metadata["normalization_doses"] = normalized_doses
    if continuous:
        metadata["analytic_se_advisory"] = True
    if options.normalized_weights:
        logger.warning(NORMALIZED_WEIGHTS_NOTE)
        metadata["normalized_weights"] = NORMALIZED_WEIGHTS_NOTE
    if fits:
        metadata["controls"] = list(panel.control_names)

    logger.info(
        "groups=%s periods=%s effects=%s placebos=%s switchers_in=%s switchers_out=%s",
        n_groups,
        panel.n_periods,
        effects,
        len(placebo_aggs),
        metadata["switchers_in"],
        metadata["switchers_out"],
    )
    return EstimationResult(
        estimates=estimates,
        effect_aggregates=effect_aggs,
        placebo_aggregates=placebo_aggs,
        influence=influence,
        schedules=schedules,
        group_effects=_group_effects(effect_list, weight, schedules),
        doses=doses,
        tests=tests,
        fits=fits,
        design_paths=design_paths,
        metadata=metadata,
    )


def _replication_options(options: EstimationOptions) -> EstimationOptions:
    return replace(options, design=None, effects_equal=None, predict_het=None, bootstrap=None, by=None)


def estimate_with_bootstrap(cells: pd.DataFrame, options: EstimationOptions, threads: int = 1) -> EstimationResult:
    result = estimate(cells, options)
    if options.bootstrap is None:
        return result
    replications, seed = options.bootstrap
    inner = _replication_options(options)
    boot = bootstrap(
        lambda sample: estimate(sample, inner).points(),
        cells,
        replications,
        seed,
        clustered=bool(options.cluster),
        threads=threads,
    )
    estimates = []
    for estimate_ in result.estimates:
        se = boot.se.get(estimate_.label, math.nan)
        var = se**2 if not math.isnan(se) else math.nan
        low, high = (math.nan, math.nan) if math.isnan(var) else confidence_interval(estimate_.point, var, options.ci_level)
        estimates.append(replace(estimate_, variance=var, ci_low=low, ci_high=high))
    result.estimates = estimates
    result.bootstrap = boot
    result.metadata.update(
        se_method="bootstrap",
        bootstrap_replications=boot.replications,
        bootstrap_failures=boot.failures,
        bootstrap_seed=seed,
    )
    return result


def attach_heterogeneity(result: EstimationResult, cells: pd.DataFrame, options: EstimationOptions) -> EstimationResult:
    if options.predict_het is None:
        return result
    names, horizons = options.predict_het
    predictors = group_predictors(cells, names)
    result.het = predict_het(result.group_effects, predictors, horizons)
    return result


def estimate_levels(cells: pd.DataFrame, options: EstimationOptions, threads: int = 1) -> list[LevelOutcome]:
    inner = replace(options, by=None)

    def run(subset: pd.DataFrame) -> EstimationResult:
        result = estimate_with_bootstrap(subset, inner, threads=1)
        return attach_heterogeneity(result, subset, inner)

    return estimate_by(cells, run, threads)


def _options_record(options: EstimationOptions) -> dict:
    record = asdict(options)
    return {key: list(value) if isinstance(value, tuple) else value for key, value in record.items()}


@dataclass
class RunOutcome:
    run_id: str
    result: EstimationResult | None
    levels: list[LevelOutcome] = field(default_factory=list)
    audit: AuditLog | None = None
    written: list[str] = field(default_factory=list)

    @property
    def details(self) -> dict:
        details: dict = {"artifacts": len(self.written)}
        if self.audit is not None:
            details["audit_entries"] = len(self.audit)
        if self.result is not None:
            details.update(
                effects=self.result.metadata["effects_estimated"],
                placebos=self.result.metadata["placebos_estimated"],
                groups=self.result.metadata["n_groups"],
            )
        if self.levels:
            details["levels"] = {str(o.level): o.diagnostic or "ok" for o in self.levels}
        return details


def _execute(config: AppConfig, options: EstimationOptions, input_path: str, run_id: str) -> RunOutcome:
    predictors = options.predict_het[0] if options.predict_het else ()
    cells, audit = load_cells(input_path, options, predictors)
    output_dir = Path(config.output_dir)
    if options.by:
        levels = estimate_levels(cells, options, config.threads)
        written = write_level_artifacts(output_dir, levels, audit, config, options)
        return RunOutcome(run_id, None, levels, audit, written)
    result = estimate_with_bootstrap(cells, options, config.threads)
    result = attach_heterogeneity(result, cells, options)
    written = write_artifacts(output_dir, result, audit, config, options)
    return RunOutcome(run_id, result, [], audit, written)


def run_pipeline(config: AppConfig, options: EstimationOptions, input_path: str) -> RunOutcome:
    options = options.validate()
    run_id = new_run_id()
    if not config.ledger_enabled:
        return _execute(config, options, input_path, run_id)

    engine = create_db_engine(config.database_url)
    init_db(engine)
    details: dict = {}

    with Session(engine) as session:
        record_run_started(session, run_id, kind="estimate", input_path=input_path, options=_options_record(options))
        session.commit()

        try:
            outcome = _execute(config, options, input_path, run_id)
            details = outcome.details
            if outcome.result is not None:
                record_estimates(session, run_id, outcome.result.estimates)
            record_run_finished(session, run_id=run_id, status="SUCCESS", details=details)
            session.commit()
            logger.info("run_id=%s status=SUCCESS details=%s", run_id, details)
            return outcome
        except Exception as exc:
            session.rollback()
            record_run_finished(
                session,
                run_id=run_id,
                status="FAILED",
                details=details,
                error_message=str(exc)[:500],
            )
            session.commit()
            logger.exception("run_id=%s status=FAILED", run_id)
            raise
