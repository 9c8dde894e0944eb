from __future__ import annotations

from dataclasses import dataclass, replace
import logging
from typing import Callable

import numpy as np
import scipy.linalg

from esdid.design import GroupSchedules
from esdid.estimators import HorizonAggregate, aggregate_effects, effect_samples
from esdid.horizons import HorizonSample, influence_rows, long_difference, side_totals
from esdid.influence import DemeanSets, SideRows, demeaned_terms, distinct_counts
from esdid.ingest import Panel


logger = logging.getLogger(__name__)

PIVOT_TOLERANCE = 1e-12


@dataclass(frozen=True)
class ResidualizationFit:
    """Weighted regression of first-differenced outcomes on first-differenced controls.

    Fitted on not-yet-switched cells of one baseline value, with period
    fixed effects partialled out.
    """

    key: int
    baseline: float
    names: tuple[str, ...]
    theta: np.ndarray
    gamma: np.ndarray
    den: np.ndarray
    den_inv: np.ndarray
    mass: float
    sample: np.ndarray
    dropped: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "baseline": self.baseline,
            "theta": dict(zip(self.names, self.theta.tolist())),
            "gamma": {str(t + 1): g for t, g in enumerate(self.gamma.tolist()) if not np.isnan(g)},
            "mass": self.mass,
            "cells": int(self.sample.sum()),
            "dropped": list(self.dropped),
        }


def independent_columns(gram: np.ndarray, tolerance: float = PIVOT_TOLERANCE) -> np.ndarray:
    """Indices of a maximal independent column set, from a pivoted QR."""
    if gram.size == 0:
        return np.array([], dtype=int)
    _, r, pivots = scipy.linalg.qr(gram, pivoting=True)
    diagonal = np.abs(np.diag(r))
    if diagonal.max() <= 0:
        return np.array([], dtype=int)
    rank = int((diagonal > tolerance * diagonal.max()).sum())
    return np.sort(pivots[:rank])


def _first_differences(panel: Panel) -> tuple[np.ndarray, np.ndarray]:
    return long_difference(panel.outcome, 1), long_difference(panel.controls, 1)


def fit_residualization(
    panel: Panel,
    schedules: GroupSchedules,
    key: int,
    names: tuple[str, ...] | None = None,
) -> ResidualizationFit:
    names = panel.control_names if names is None else names
    dy, dx = _first_differences(panel)
    n_periods = schedules.n_periods
    periods = np.arange(1, n_periods + 1)
    in_key = schedules.baseline_key == key
    last = int((schedules.first_switch[in_key] - 1).max()) if in_key.any() else 0
    sample = (
        in_key[:, None]
        & (schedules.first_switch[:, None] > periods[None, :])
        & (periods[None, :] >= 2)
        & (periods[None, :] <= last)
        & ~np.isnan(dy)
        & ~np.isnan(dx).any(axis=2)
        & (panel.weight > 0)
    )
    w = np.where(sample, panel.weight, 0.0)
    mass = float(w.sum())
    n_controls = dx.shape[2]
    baseline = float(schedules.baseline[in_key][0]) if in_key.any() else float("nan")
    if mass <= 0:
        logger.warning("residualization key=%s empty sample, coefficients set to zero", key)
        empty = np.zeros((n_controls, n_controls))
        return ResidualizationFit(
            key, baseline, names, np.zeros(n_controls), np.full(n_periods, np.nan), empty, empty, 0.0, sample, tuple(names)
        )

    dx0 = np.where(sample[:, :, None], np.nan_to_num(dx), 0.0)
    dy0 = np.where(sample, np.nan_to_num(dy), 0.0)
    period_mass = w.sum(axis=0)
    safe = np.where(period_mass > 0, period_mass, 1.0)
    dx_bar = np.einsum("gt,gtk->tk", w, dx0) / safe[:, None]
    dx_dot = np.where(sample[:, :, None], dx0 - dx_bar[None, :, :], 0.0)

    den = np.einsum("gt,gtk,gtl->kl", w, dx_dot, dx_dot) / mass
    rhs = np.einsum("gt,gtk,gt->k", w, dx_dot, dy0) / mass
    kept = independent_columns(den)
    dropped = tuple(name for k, name in enumerate(names) if k not in set(kept.tolist()))
    if dropped:
        logger.warning("residualization key=%s collinear controls dropped=%s", key, list(dropped))

    theta = np.zeros(n_controls)
    den_inv = np.zeros((n_controls, n_controls))
    if kept.size:
        block = den[np.ix_(kept, kept)]
        theta[kept] = scipy.linalg.solve(block, rhs[kept], assume_a="sym")
        den_inv[np.ix_(kept, kept)] = scipy.linalg.inv(block)

    residual = dy0 - np.einsum("gtk,k->gt", dx0, theta)
    gamma = np.where(period_mass > 0, (w * residual).sum(axis=0) / safe, np.nan)
    return ResidualizationFit(key, baseline, names, theta, gamma, den, den_inv, mass, sample, dropped)


def fit_all(panel: Panel, schedules: GroupSchedules) -> dict[int, ResidualizationFit]:
    """One fit per baseline value that has switchers."""
    keys = np.unique(schedules.baseline_key[schedules.switchers])
    return {int(key): fit_residualization(panel, schedules, int(key)) for key in keys}


def continuous_mode(panel: Panel, schedules: GroupSchedules, order: int) -> Panel:
    """Append D1^k * 1{t >= t'} interactions (k = 0..order, t' = 1..T) to the controls."""
    n_periods = schedules.n_periods
    periods = np.arange(1, n_periods + 1)
    columns = []
    names = []
    labels = panel.period_labels
    for k in range(order + 1):
        power = schedules.baseline**k
        for start in periods:
            columns.append(power[:, None] * (periods[None, :] >= start))
            names.append(f"D1^{k}*[t>={labels[start - 1]}]")
    extra = np.stack(columns, axis=2)
    logger.warning("continuous mode: analytic standard errors are advisory, bootstrap recommended")
    return replace(
        panel,
        controls=np.concatenate([panel.controls, extra], axis=2),
        control_names=panel.control_names + tuple(names),
    )


def _theta_by_group(fits: dict[int, ResidualizationFit], schedules: GroupSchedules, n_controls: int) -> np.ndarray:
    theta = np.zeros((schedules.groups.size, n_controls))
    for key, fit in fits.items():
        theta[schedules.baseline_key == key] = fit.theta
    return theta


def adjusted_differences(
    panel: Panel,
    schedules: GroupSchedules,
    fits: dict[int, ResidualizationFit],
) -> Callable[[str, int], np.ndarray]:
    """Outcome changes net of control changes times the baseline-specific theta."""
    theta = _theta_by_group(fits, schedules, panel.controls.shape[2])

    def diff_for(kind: str, horizon: int) -> np.ndarray:
        dy = long_difference(panel.outcome, horizon, kind)
        dx = long_difference(panel.controls, horizon, kind)
        return dy - np.einsum("gtk,gk->gt", dx, theta)

    return diff_for


def adjusted_effects(
    panel: Panel,
    schedules: GroupSchedules,
    fits: dict[int, ResidualizationFit],
    horizons: int,
    switchers: str = "both",
    eligible: np.ndarray | None = None,
) -> tuple[list[HorizonSample], list[HorizonAggregate]]:
    diff_for = adjusted_differences(panel, schedules, fits)
    samples = effect_samples(diff_for, panel.weight, schedules, horizons, eligible)
    return samples, aggregate_effects(samples, panel.weight, schedules, switchers)


@dataclass(frozen=True)
class ControlLinearization:
    """First-order terms carrying the sampling noise of theta into U^X.

    ``v_rows[key]`` is V^d_g (G x K) and ``v_var_rows[key]`` its demeaned
    twin used for variances.
    """

    fits: dict[int, ResidualizationFit]
    keys: np.ndarray
    v_rows: dict[int, np.ndarray]
    v_var_rows: dict[int, np.ndarray]

    def m_rows(
        self,
        sample: HorizonSample,
        weight: np.ndarray,
        schedules: GroupSchedules,
        dx_long: np.ndarray,
        side: int,
    ) -> np.ndarray:
        """m_{g,d,l}: the U machinery applied to each control's long difference."""
        n_groups = weight.shape[0]
        totals = side_totals(sample, weight, schedules, side)
        return np.column_stack(
            [influence_rows(sample, weight, totals, dx_long[:, :, k], 1.0, n_groups) for k in range(dx_long.shape[2])]
        ) if dx_long.shape[2] else np.zeros((n_groups, 0))

    def m_vectors(self, m: np.ndarray) -> dict[int, np.ndarray]:
        n_groups = m.shape[0]
        return {key: m[self.keys == key].sum(axis=0) / n_groups for key in self.fits}

    def adjustment(self, m: np.ndarray, variance_leg: bool = False) -> np.ndarray:
        rows = self.v_var_rows if variance_leg else self.v_rows
        total = np.zeros(m.shape[0])
        for key, vector in self.m_vectors(m).items():
            total += rows[key] @ vector
        return total


def control_linearization(
    panel: Panel,
    schedules: GroupSchedules,
    fits: dict[int, ResidualizationFit],
    units: np.ndarray | None = None,
) -> ControlLinearization:
    dy, dx = _first_differences(panel)
    n_groups = schedules.groups.size
    units = np.arange(n_groups) if units is None else units
    v_rows: dict[int, np.ndarray] = {}
    v_var_rows: dict[int, np.ndarray] = {}
    for key, fit in fits.items():
        n_controls = fit.theta.size
        if fit.mass <= 0:
            v_rows[key] = np.zeros((n_groups, n_controls))
            v_var_rows[key] = np.zeros((n_groups, n_controls))
            continue
        w = np.where(fit.sample, panel.weight, 0.0)
        dx0 = np.where(fit.sample[:, :, None], np.nan_to_num(dx), 0.0)
        dy0 = np.where(fit.sample, np.nan_to_num(dy), 0.0)
        safe = np.where(w.sum(axis=0) > 0, w.sum(axis=0), 1.0)
        dx_bar = np.einsum("gt,gtk->tk", w, dx0) / safe[:, None]
        dx_dot = np.where(fit.sample[:, :, None], dx0 - dx_bar[None, :, :], 0.0)
        scale = n_groups / fit.mass

        score = np.einsum("gt,gtk,gt->gk", w, dx_dot, dy0)
        v_rows[key] = scale * score @ fit.den_inv.T - fit.theta

        counts = np.array(
            [distinct_counts(np.zeros(n_groups, dtype=int), units, fit.sample[:, j], 1)[0] for j in range(fit.sample.shape[1])]
        )
        enough = counts >= 2
        dof = np.where(enough, np.sqrt(counts / np.maximum(counts - 1, 1)), 1.0)
        expected = (np.nan_to_num(fit.gamma)[None, :] + np.einsum("gtk,k->gt", dx0, fit.theta)) * enough[None, :]
        score_var = np.einsum("gt,gtk,gt->gk", w * dof[None, :], dx_dot, dy0 - expected)
        v_var_rows[key] = scale * score_var @ fit.den_inv.T - fit.theta
    return ControlLinearization(fits, schedules.baseline_key, v_rows, v_var_rows)


def adjusted_variance(
    sample: HorizonSample,
    weight: np.ndarray,
    schedules: GroupSchedules,
    sets: DemeanSets,
    linearization: ControlLinearization,
    controls: np.ndarray,
    sides: tuple[int, ...],
) -> SideRows:
    """U^{+,X} = U~^{+} - sum_d M^+_d V^d and U^{-,X} = U~^{-} + sum_d M^-_d V^d, with variance twins."""
    n_groups = weight.shape[0]
    dx_long = long_difference(controls, sample.horizon, sample.kind)
    out = {}
    for side in (1, -1):
        totals = side_totals(sample, weight, schedules, side)
        if side not in sides or totals.mass <= 0:
            out[side] = (np.zeros(n_groups), np.zeros(n_groups), 0.0)
            continue
        base = influence_rows(sample, weight, totals, sample.diff, side, n_groups)
        expected, dof = demeaned_terms(sample, totals, weight, sets, sample.diff)
        base_var = influence_rows(sample, weight, totals, dof * (np.nan_to_num(sample.diff) - expected), side, n_groups)
        m = linearization.m_rows(sample, weight, schedules, dx_long, side)
        out[side] = (
            base - side * linearization.adjustment(m),
            base_var - side * linearization.adjustment(m, variance_leg=True),
            totals.mass,
        )
    return SideRows(
        plus=out[1][0],
        minus=out[-1][0],
        plus_var=out[1][1],
        minus_var=out[-1][1],
        n_plus=out[1][2],
        n_minus=out[-1][2],
    )

