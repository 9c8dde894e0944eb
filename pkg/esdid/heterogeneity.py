from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import logging
import math
from typing import Callable

import numpy as np
import pandas as pd
import statsmodels.api as sm

from esdid.errors import EsdidError, InputError
from esdid.ingest import BY, GROUP, group_level_values


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LevelOutcome:
    level: object
    result: object | None
    diagnostic: str | None = None


@dataclass
class HetReport:
    tables: dict[int, pd.DataFrame] = field(default_factory=dict)
    joint_p_values: dict[int, float] = field(default_factory=dict)
    n_switchers: dict[int, int] = field(default_factory=dict)
    skipped: dict[int, str] = field(default_factory=dict)

    def to_records(self) -> list[dict]:
        records = []
        for horizon, table in sorted(self.tables.items()):
            for row in table.to_dict("records"):
                records.append({"horizon": horizon, **row, "joint_p_value": self.joint_p_values[horizon]})
        return records


def estimate_by(
    cells: pd.DataFrame,
    run: Callable[[pd.DataFrame], object],
    threads: int = 1,
) -> list[LevelOutcome]:
    """Run the full estimation separately on each level of the group-level ``by`` variable."""
    groups = pd.Index(pd.unique(cells[GROUP])).sort_values()
    values = pd.Series(group_level_values(cells, BY, groups), index=groups)
    levels = sorted(values.unique().tolist())

    def one(level) -> LevelOutcome:
        members = values.index[values == level]
        subset = cells[cells[GROUP].isin(members)].reset_index(drop=True)
        subset.attrs = dict(cells.attrs)
        try:
            return LevelOutcome(level, run(subset))
        except EsdidError as exc:
            logger.warning("by_level=%s empty reason=%s", level, exc)
            return LevelOutcome(level, None, str(exc))

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return list(pool.map(one, levels))


def group_predictors(cells: pd.DataFrame, predictors: tuple[str, ...]) -> pd.DataFrame:
    groups = pd.Index(pd.unique(cells[GROUP])).sort_values()
    try:
        columns = {name: group_level_values(cells, name, groups) for name in predictors}
    except InputError as exc:
        raise InputError(f"predict_het predictors must be time-invariant: {exc}") from exc
    return pd.DataFrame(columns, index=groups).astype(float)


def predict_het(
    group_effects: pd.DataFrame,
    predictors: pd.DataFrame,
    horizons: tuple[int, ...] | None = None,
) -> HetReport:
    """WLS of switchers' group-level effects on predictors, with HC1 standard errors.

    ``group_effects`` has columns group, horizon, effect, weight, direction;
    effects of switchers-out are sign-flipped.
    """
    report = HetReport()
    available = sorted(group_effects["horizon"].unique().tolist())
    for horizon in horizons or available:
        rows = group_effects[group_effects["horizon"] == horizon]
        y = (rows["effect"] * rows["direction"]).to_numpy(dtype=float)
        x = predictors.reindex(rows["group"].to_numpy())
        varying = [name for name in x.columns if x[name].nunique() > 1]
        constant = [name for name in x.columns if name not in varying]
        if constant:
            logger.warning("predict_het horizon=%s predictors collinear with intercept dropped=%s", horizon, constant)
        if len(rows) < len(varying) + 1 or len(rows) == 0:
            report.skipped[horizon] = f"{len(rows)} switchers for {len(varying)} predictors"
            logger.warning("predict_het horizon=%s skipped switchers=%s predictors=%s", horizon, len(rows), len(varying))
            continue
        design = np.column_stack([np.ones(len(rows)), x[varying].to_numpy(dtype=float)])
        fit = sm.WLS(y, design, weights=rows["weight"].to_numpy(dtype=float)).fit(cov_type="HC1")
        names = ["const"] + varying
        report.tables[horizon] = pd.DataFrame(
            {
                "predictor": names,
                "estimate": np.asarray(fit.params),
                "se": np.asarray(fit.bse),
                "t": np.asarray(fit.tvalues),
                "p_value": np.asarray(fit.pvalues),
            }
        )
        if varying:
            restriction = np.eye(len(names))[1:]
            report.joint_p_values[horizon] = float(fit.f_test(restriction).pvalue)
        else:
            report.joint_p_values[horizon] = math.nan
        report.n_switchers[horizon] = len(rows)
    return report
