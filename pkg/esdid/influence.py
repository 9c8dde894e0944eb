from __future__ import annotations

from dataclasses import dataclass
import logging
import math

import numpy as np
import pandas as pd

from esdid.design import GroupSchedules, SWITCH_IN, SWITCH_OUT
from esdid.estimators import DoseDeltas, HorizonAggregate
from esdid.horizons import HorizonSample, SideTotals, influence_rows, side_totals


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SideRows:
    """Influence rows of one horizon, split by switcher side.

    ``plus``/``minus`` hold U^{+}/U^{-}; the ``*_var`` twins hold the
    cohort-demeaned rows used for variances.
    """

    plus: np.ndarray
    minus: np.ndarray
    plus_var: np.ndarray
    minus_var: np.ndarray
    n_plus: float
    n_minus: float

    def _mix(self, plus: np.ndarray, minus: np.ndarray) -> np.ndarray:
        total = self.n_plus + self.n_minus
        if total <= 0:
            return np.zeros_like(plus)
        return (self.n_plus * plus + self.n_minus * minus) / total

    @property
    def combined(self) -> np.ndarray:
        return self._mix(self.plus, self.minus)

    @property
    def combined_var(self) -> np.ndarray:
        return self._mix(self.plus_var, self.minus_var)


@dataclass(frozen=True)
class InfluenceTable:
    groups: pd.Index
    units: np.ndarray
    labels: tuple[str, ...]
    rows: np.ndarray
    rows_var: np.ndarray
    plus: np.ndarray
    minus: np.ndarray
    plus_var: np.ndarray
    minus_var: np.ndarray

    def column(self, label: str) -> int:
        return self.labels.index(label)

    def to_frame(self) -> pd.DataFrame:
        frames = []
        for j, label in enumerate(self.labels):
            frames.append(
                pd.DataFrame(
                    {
                        "group": self.groups,
                        "estimate": label,
                        "U": self.rows[:, j],
                        "U_var": self.rows_var[:, j],
                        "U_plus": self.plus[:, j],
                        "U_minus": self.minus[:, j],
                        "U_plus_var": self.plus_var[:, j],
                        "U_minus_var": self.minus_var[:, j],
                    }
                )
            )
        return pd.concat(frames, ignore_index=True)


@dataclass(frozen=True)
class DemeanSets:
    """Demeaning keys: comparison cells, counting units and switcher cohorts."""

    comparison: np.ndarray
    units: np.ndarray
    first_switch: np.ndarray
    cohort_treatment: np.ndarray
    granular: bool

    def cohort(self, horizon: int) -> np.ndarray:
        rows = np.arange(self.comparison.size)
        start = np.clip(self.first_switch - 1, 0, self.cohort_treatment.shape[1] - 1)
        columns = {"comparison": self.comparison, "F": self.first_switch}
        span = horizon if self.granular else 1
        for k in range(span):
            col = np.clip(start + k, 0, self.cohort_treatment.shape[1] - 1)
            columns[f"d{k}"] = self.cohort_treatment[rows, col]
        frame = pd.DataFrame(columns)
        return frame.groupby(list(frame.columns), sort=True, dropna=False).ngroup().to_numpy()


def build_demeaning(
    schedules: GroupSchedules,
    units: np.ndarray | None = None,
    granular: bool = False,
    continuous: bool = False,
) -> DemeanSets:
    """Cohorts are (comparison cell, F, D_F), or the whole path from F when granular.

    Counts are taken over ``units``: groups, or clusters when clustering.
    """
    n_groups = schedules.groups.size
    units = np.arange(n_groups) if units is None else units
    if continuous:
        periods = np.arange(1, schedules.n_periods + 1)
        post = periods[None, :] >= schedules.first_switch[:, None]
        cohort_treatment = np.where(post, schedules.direction[:, None], 0).astype(float)
    else:
        cohort_treatment = schedules.doses
    return DemeanSets(
        comparison=schedules.comparison,
        units=units,
        first_switch=schedules.first_switch,
        cohort_treatment=cohort_treatment,
        granular=granular,
    )


def distinct_counts(codes: np.ndarray, units: np.ndarray, mask: np.ndarray, size: int) -> np.ndarray:
    if not mask.any():
        return np.zeros(size, dtype=int)
    pairs = np.unique(np.stack([codes[mask], units[mask]]), axis=1)
    return np.bincount(pairs[0], minlength=size)


def _weighted_means(codes: np.ndarray, mask: np.ndarray, weight: np.ndarray, values: np.ndarray, size: int) -> np.ndarray:
    mass = np.bincount(codes[mask], weights=weight[mask], minlength=size)
    total = np.bincount(codes[mask], weights=weight[mask] * values[mask], minlength=size)
    return np.divide(total, mass, out=np.zeros(size), where=mass > 0)


def _dof(count: np.ndarray) -> np.ndarray:
    return np.sqrt(count / np.maximum(count - 1, 1))


def demeaned_terms(
    sample: HorizonSample,
    totals: SideTotals,
    weight: np.ndarray,
    sets: DemeanSets,
    values: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Expected outcome change E and DOF factor for every (g, t) entering U^{var}.

    Controls are demeaned within not-yet-switchers of their cell, switchers
    within their cohort; both fall back to the union of the cell's
    not-yet-switchers and same-side switchers when their own set is a
    singleton. A singleton union (possible only under clustering) gives
    E = 0 and DOF = 1.
    """
    n_groups, n_periods = values.shape
    expected = np.zeros((n_groups, n_periods))
    dof = np.ones((n_groups, n_periods))
    filled = np.nan_to_num(values)
    classes = sets.comparison
    n_classes = int(classes.max()) + 1
    cohort = sets.cohort(sample.horizon)
    n_cohorts = int(cohort.max()) + 1

    for j in range(n_periods):
        control = sample.control[:, j]
        switcher = totals.mask[:, j]
        if not switcher.any():
            continue
        w = weight[:, j]
        v = filled[:, j]
        union = control | switcher

        n_control = distinct_counts(classes, sets.units, control, n_classes)
        n_union = distinct_counts(classes, sets.units, union, n_classes)
        n_cohort = distinct_counts(cohort, sets.units, switcher, n_cohorts)
        mean_control = _weighted_means(classes, control, w, v, n_classes)
        mean_union = _weighted_means(classes, union, w, v, n_classes)
        mean_cohort = _weighted_means(cohort, switcher, w, v, n_cohorts)

        union_count = n_union[classes]
        fallback_mean = np.where(union_count > 1, mean_union[classes], 0.0)
        fallback_dof = np.where(union_count > 1, _dof(union_count), 1.0)

        own_control = n_control[classes]
        control_mean = np.where(own_control > 1, mean_control[classes], fallback_mean)
        control_dof = np.where(own_control > 1, _dof(own_control), fallback_dof)

        own_cohort = n_cohort[cohort]
        cohort_mean = np.where(own_cohort > 1, mean_cohort[cohort], fallback_mean)
        cohort_dof = np.where(own_cohort > 1, _dof(own_cohort), fallback_dof)

        expected[:, j] = np.where(switcher, cohort_mean, np.where(control, control_mean, 0.0))
        dof[:, j] = np.where(switcher, cohort_dof, np.where(control, control_dof, 1.0))

        if (switcher & (union_count <= 1)).any() and (sets.units == np.arange(sets.units.size)).all():
            raise AssertionError(f"singleton demeaning set without clustering at period {j + 1}")
    return expected, dof


def side_rows(
    sample: HorizonSample,
    weight: np.ndarray,
    schedules: GroupSchedules,
    sets: DemeanSets,
    sides: tuple[int, ...] = (SWITCH_IN, SWITCH_OUT),
) -> SideRows:
    n_groups = weight.shape[0]
    out = {}
    for side in (SWITCH_IN, SWITCH_OUT):
        totals = side_totals(sample, weight, schedules, side)
        if side not in sides or totals.mass <= 0:
            out[side] = (np.zeros(n_groups), np.zeros(n_groups), 0.0)
            continue
        rows = influence_rows(sample, weight, totals, sample.diff, side, n_groups)
        expected, dof = demeaned_terms(sample, totals, weight, sets, sample.diff)
        demeaned = dof * (np.nan_to_num(sample.diff) - expected)
        rows_var = influence_rows(sample, weight, totals, demeaned, side, n_groups)
        out[side] = (rows, rows_var, totals.mass)
    return SideRows(
        plus=out[SWITCH_IN][0],
        minus=out[SWITCH_OUT][0],
        plus_var=out[SWITCH_IN][1],
        minus_var=out[SWITCH_OUT][1],
        n_plus=out[SWITCH_IN][2],
        n_minus=out[SWITCH_OUT][2],
    )


def total_effect_rows(rows: list[SideRows], doses: DoseDeltas) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """U_g and its variance twin for the average total effect."""
    n_groups = rows[0].plus.size

    def side(values, w, dose):
        denominator = float((w * dose).sum())
        if denominator == 0:
            return np.zeros(n_groups)
        return np.column_stack(values) @ w / denominator

    plus = side([r.plus for r in rows], doses.w_plus_l, doses.dose_plus)
    minus = side([r.minus for r in rows], doses.w_minus_l, doses.dose_minus)
    plus_var = side([r.plus_var for r in rows], doses.w_plus_l, doses.dose_plus)
    minus_var = side([r.minus_var for r in rows], doses.w_minus_l, doses.dose_minus)
    w = doses.w_plus
    return w * plus + (1 - w) * minus, w * plus_var + (1 - w) * minus_var, plus, minus, plus_var, minus_var


def build_influence(
    groups: pd.Index,
    units: np.ndarray,
    columns: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]],
) -> InfluenceTable:
    """Stack per-estimate (U, U_var, U+, U-, U+_var, U-_var) columns into one table."""
    labels = tuple(columns)
    parts = list(zip(*columns.values())) if columns else [()] * 6
    stacked = [np.column_stack(p) if p else np.zeros((groups.size, 0)) for p in parts]
    return InfluenceTable(groups, units, labels, *stacked)


def cluster_totals(rows: np.ndarray, units: np.ndarray) -> np.ndarray:
    """Sum rows (G,) or (G, k) within counting units."""
    n_units = int(units.max()) + 1
    if rows.ndim == 1:
        return np.bincount(units, weights=rows, minlength=n_units)
    out = np.zeros((n_units, rows.shape[1]))
    np.add.at(out, units, rows)
    return out


def variance(rows_var: np.ndarray, units: np.ndarray, n_groups: int) -> float:
    """sigma^2 = (1/G^2) sum over clusters of (sum of U^{var} within cluster)^2."""
    totals = cluster_totals(rows_var, units)
    return float(np.dot(totals, totals)) / n_groups**2


def covariance(rows_var: np.ndarray, units: np.ndarray, n_groups: int) -> np.ndarray:
    totals = cluster_totals(rows_var, units)
    return totals.T @ totals / n_groups**2


def normalized_variance(sigma2: float, dose: float) -> float:
    if not dose or math.isnan(dose):
        return math.nan
    return sigma2 / dose**2


def log_linearization_gaps(points: dict[str, float], table: InfluenceTable, tolerance: float = 1e-10) -> list[str]:
    """Labels whose influence-row mean misses the point estimate by more than ``tolerance``, each logged."""
    gaps = []
    n_groups = table.rows.shape[0]
    for label, point in points.items():
        if math.isnan(point):
            continue
        mean = float(table.rows[:, table.column(label)].sum()) / n_groups
        if not math.isclose(mean, point, rel_tol=tolerance, abs_tol=tolerance):
            logger.warning("estimate=%s linearization gap point=%s influence_mean=%s", label, point, mean)
            gaps.append(label)
    return gaps


def sides_for(aggregate: HorizonAggregate) -> tuple[int, ...]:
    sides = []
    if aggregate.n_plus > 0:
        sides.append(SWITCH_IN)
    if aggregate.n_minus > 0:
        sides.append(SWITCH_OUT)
    return tuple(sides)
