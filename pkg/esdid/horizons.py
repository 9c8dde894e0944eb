"""Per-horizon switcher and control samples shared by the estimators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


EFFECT = "effect"
PLACEBO = "placebo"


def long_difference(values: np.ndarray, horizon: int, kind: str = EFFECT) -> np.ndarray:
    """Outcome change attached to period t.

    Effects use v[t] - v[t-h]; placebos mirror it as v[t-2h] - v[t-h].
    Works on (G, T) and (G, T, K) arrays.
    """
    n_periods = values.shape[1]
    out = np.full(values.shape, np.nan)
    if kind == EFFECT:
        if horizon < n_periods:
            out[:, horizon:] = values[:, horizon:] - values[:, : n_periods - horizon]
    elif kind == PLACEBO:
        if 2 * horizon < n_periods:
            out[:, 2 * horizon :] = values[:, : n_periods - 2 * horizon] - values[:, horizon : n_periods - horizon]
    else:
        raise ValueError(f"Unsupported horizon kind: {kind}")
    return out


def class_sum(values: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Sum (G, T) values within each code and broadcast back to the rows."""
    sums = np.zeros((int(codes.max()) + 1,) + values.shape[1:])
    np.add.at(sums, codes, values)
    return sums[codes]


@dataclass(frozen=True)
class HorizonSample:
    kind: str
    horizon: int
    diff: np.ndarray
    switcher: np.ndarray
    control: np.ndarray
    control_mass: np.ndarray

    @property
    def switchers(self) -> np.ndarray:
        return self.switcher.any(axis=1)

    @property
    def label(self) -> str:
        return f"{self.kind}_{self.horizon}"


def build_sample(
    diff: np.ndarray,
    weight: np.ndarray,
    schedules,
    horizon: int,
    kind: str = EFFECT,
    eligible: np.ndarray | None = None,
    within: HorizonSample | None = None,
) -> HorizonSample:
    """Switchers measured at t = F - 1 + horizon and their not-yet-switched controls.

    ``within`` restricts placebo switchers to the matching effect sample.
    """
    n_periods = diff.shape[1]
    periods = np.arange(1, n_periods + 1)
    first_switch = schedules.first_switch
    observed = ~np.isnan(diff) & (weight > 0)
    control = (first_switch[:, None] > periods[None, :]) & observed
    control_mass = class_sum(np.where(control, weight, 0.0), schedules.comparison)

    target = first_switch - 1 + horizon
    reachable = (schedules.direction != 0) & (target <= schedules.last_control) & ~schedules.dropped
    switcher = (periods[None, :] == target[:, None]) & reachable[:, None] & observed & (control_mass > 0)
    if eligible is not None:
        switcher &= eligible[:, None]
    if within is not None:
        switcher &= within.switcher
    return HorizonSample(kind, horizon, diff, switcher, control, control_mass)


@dataclass(frozen=True)
class SideTotals:
    side: int
    mask: np.ndarray
    mass: float
    count: int
    class_mass: np.ndarray


def side_totals(sample: HorizonSample, weight: np.ndarray, schedules, side: int) -> SideTotals:
    mask = sample.switcher & (schedules.direction == side)[:, None]
    masked = np.where(mask, weight, 0.0)
    return SideTotals(
        side=side,
        mask=mask,
        mass=float(masked.sum()),
        count=int(mask.any(axis=1).sum()),
        class_mass=class_sum(masked, schedules.comparison),
    )


def influence_rows(
    sample: HorizonSample,
    weight: np.ndarray,
    totals: SideTotals,
    values: np.ndarray,
    sign: float,
    n_groups: int,
) -> np.ndarray:
    """(G / N_side) * sum_t sign * [switcher - (N_side,t / N_t) * control] * N * values."""
    if totals.mass <= 0:
        return np.zeros(weight.shape[0])
    ratio = np.divide(
        totals.class_mass,
        sample.control_mass,
        out=np.zeros_like(totals.class_mass),
        where=sample.control_mass > 0,
    )
    bracket = sign * (totals.mask.astype(float) - ratio * sample.control)
    contributions = bracket * weight * np.nan_to_num(values)
    return n_groups / totals.mass * contributions.sum(axis=1)
