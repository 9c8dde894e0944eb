from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import logging
import math
from pathlib import Path

import numpy as np
import pandas as pd
import scipy.stats
from sqlalchemy.orm import Session

from esdid.config import AppConfig
from esdid.db import create_db_engine, init_db, new_run_id, record_run_finished, record_run_started, record_simulation_cells
from esdid.errors import EsdidError
from esdid.pipeline import estimate, prepare_frame
from esdid.sim.base_panels import load_base_panel
from esdid.sim.dgp import DgpSpec, cluster_layout, generate, intra_cluster_correlation, truths


logger = logging.getLogger(__name__)

TABLE_COLUMNS = ["effect_1", "effect_2", "effect_3", "average_total", "placebo_1", "placebo_2", "placebo_3"]
Z_975 = float(scipy.stats.norm.ppf(0.975))


@dataclass(frozen=True)
class Replication:
    estimates: dict[str, tuple[float, float, float]]
    placebo_p_value: float = math.nan
    equal_p_value: float = math.nan


@dataclass
class SpecReport:
    spec: DgpSpec
    cells: pd.DataFrame
    replications: int
    failures: int
    placebo_rejection: float
    equal_rejection: float
    extras: dict = field(default_factory=dict)


def run_replication(spec: DgpSpec, rep: int) -> Replication:
    options = spec.estimation_options()
    frame = generate(spec, rep)
    cells, _ = prepare_frame(frame, options)
    result = estimate(cells, options)
    estimates = {e.label: (e.point, e.ci_low, e.ci_high) for e in result.estimates}
    placebo = result.tests.get("placebo_joint")
    equal = result.tests.get("effects_equal")
    return Replication(
        estimates=estimates,
        placebo_p_value=placebo.p_value if placebo else math.nan,
        equal_p_value=equal.p_value if equal else math.nan,
    )


def coverage_labels(spec: DgpSpec) -> dict[str, str]:
    """Table column to estimate label; normalized runs report normalized effects and placebos."""
    normalized = bool(spec.options.get("normalized"))
    mapping = {}
    for column in TABLE_COLUMNS:
        if normalized and column != "average_total":
            mapping[column] = f"normalized_{column}"
        else:
            mapping[column] = column
    return mapping


def mc_standard_error(p: float, replications: int) -> float:
    if replications <= 0 or math.isnan(p):
        return math.nan
    return math.sqrt(p * (1 - p) / replications)


def implied_inflation(coverage: float) -> float:
    """CI width inflation implied by a coverage rate: z_{(1+p)/2} / z_{0.975}."""
    if math.isnan(coverage) or coverage >= 1:
        return math.nan
    return float(scipy.stats.norm.ppf((1 + coverage) / 2)) / Z_975


def summarize(spec: DgpSpec, results: list[Replication | None]) -> SpecReport:
    kept = [r for r in results if r is not None]
    failures = len(results) - len(kept)
    mapping = coverage_labels(spec)
    truth = truths(spec, list(mapping.values()))
    records = []
    for column, label in mapping.items():
        draws = [r.estimates[label] for r in kept if label in r.estimates and not math.isnan(r.estimates[label][1])]
        coverage = mean_estimate = sd_estimate = math.nan
        if draws:
            covered = np.array([d[1] <= truth[label] <= d[2] for d in draws])
            coverage = float(covered.mean())
            mean_estimate = float(np.mean([d[0] for d in draws]))
            if len(draws) > 1:
                sd_estimate = float(np.std([d[0] for d in draws], ddof=1))
        # trends_lin rows leave average_total and the last placebo empty
        records.append(
            {
                "spec": spec.name,
                "column": column,
                "label": label,
                "coverage": coverage,
                "mc_se": mc_standard_error(coverage, len(draws)),
                "mean_estimate": mean_estimate,
                "sd_estimate": sd_estimate,
                "truth": truth[label],
                "replications": len(draws),
                "failures": failures,
                "implied_inflation": implied_inflation(coverage),
            }
        )

    def rejection(values: list[float]) -> float:
        values = [v for v in values if not math.isnan(v)]
        return float(np.mean(np.array(values) < 0.05)) if values else math.nan

    return SpecReport(
        spec=spec,
        cells=pd.DataFrame(records),
        replications=len(kept),
        failures=failures,
        placebo_rejection=rejection([r.placebo_p_value for r in kept]),
        equal_rejection=rejection([r.equal_p_value for r in kept]),
    )


def run_spec(spec: DgpSpec, replications: int | None = None, threads: int = 1) -> SpecReport:
    count = replications or spec.replications

    def one(rep: int) -> Replication | None:
        try:
            return run_replication(spec, rep)
        except EsdidError as exc:
            logger.warning("spec=%s replication=%s failed reason=%s", spec.name, rep, exc)
            return None

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(one, range(count)))
    report = summarize(spec, results)
    if spec.trend == "cluster_ar1":
        report.extras["intra_cluster_correlation"] = cluster_icc(spec)
    logger.info(
        "spec=%s replications=%s failures=%s placebo_rejection=%s",
        spec.name,
        report.replications,
        report.failures,
        report.placebo_rejection,
    )
    return report


def cluster_icc(spec: DgpSpec, rep: int = 0) -> float:
    """ICC of the workers' time-averaged status-quo outcome within clusters."""
    base = load_base_panel(spec.base_panel)
    frame = generate(spec, rep)
    if spec.effect:
        frame = frame.assign(Y=frame["Y"] - spec.effect * frame["D"])
    means = frame.groupby("G", sort=True)["Y"].mean()
    keep, cluster = cluster_layout(base)
    cluster_of = pd.Series(cluster, index=keep)
    return intra_cluster_correlation(means.to_numpy(), cluster_of.reindex(means.index).to_numpy())


def run_grid(specs: list[DgpSpec], replications: int | None = None, threads: int = 1) -> list[SpecReport]:
    if replications is not None and replications < 2:
        raise ValueError(f"Unsupported number of replications: {replications}")
    return [run_spec(spec, replications, threads) for spec in specs]


def report_frame(reports: list[SpecReport]) -> pd.DataFrame:
    frames = []
    for report in reports:
        cells = report.cells.copy()
        cells["placebo_rejection"] = report.placebo_rejection
        cells["equal_effects_rejection"] = report.equal_rejection
        cells["intra_cluster_correlation"] = report.extras.get("intra_cluster_correlation", math.nan)
        frames.append(cells)
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()


def coverage_table(reports: list[SpecReport]) -> pd.DataFrame:
    """Rows per spec, coverage per estimate, plus the placebo and equal-effects rejection rates."""
    rows = []
    for report in reports:
        row = {"spec": report.spec.name}
        row.update(dict(zip(report.cells["column"], report.cells["coverage"])))
        row["f_test"] = report.placebo_rejection
        row["equal_test"] = report.equal_rejection
        rows.append(row)
    return pd.DataFrame(rows, columns=["spec"] + TABLE_COLUMNS + ["f_test", "equal_test"])


def run_simulation(config: AppConfig, specs: list[DgpSpec], replications: int | None, output_path: str) -> list[SpecReport]:
    """Run the grid under the run ledger and write the CSV report."""

    def execute() -> list[SpecReport]:
        reports = run_grid(specs, replications, config.threads)
        out = Path(output_path)
        out.parent.mkdir(parents=True, exist_ok=True)
        report_frame(reports).to_csv(out, index=False, lineterminator="\n")
        return reports

    if not config.ledger_enabled:
        return execute()

    engine = create_db_engine(config.database_url)
    init_db(engine)
    run_id = new_run_id()
    details: dict = {}
    with Session(engine) as session:
        options = {"specs": [spec.name for spec in specs], "replications": replications}
        record_run_started(session, run_id, kind="simulate", input_path=output_path, options=options)
        session.commit()
        try:
            reports = execute()
            rows = report_frame(reports).to_dict("records")
            written = record_simulation_cells(session, run_id, rows)
            details = {"specs": len(reports), "cells": written, "failures": sum(r.failures for r in reports)}
            record_run_finished(session, run_id=run_id, status="SUCCESS", details=details)
            session.commit()
            logger.info("run_id=%s status=SUCCESS details=%s", run_id, details)
            return reports
        except Exception as exc:
            session.rollback()
            record_run_finished(session, run_id=run_id, status="FAILED", details=details, error_message=str(exc)[:500])
            session.commit()
            logger.exception("run_id=%s status=FAILED", run_id)
            raise
