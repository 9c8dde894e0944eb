from __future__ import annotations

from dataclasses import asdict, dataclass, replace
import logging
import math
from typing import Callable

import numpy as np

from esdid.design import GroupSchedules, SWITCH_IN, SWITCH_OUT
from esdid.errors import EstimationError, UsageError
from esdid.horizons import (
    EFFECT,
    PLACEBO,
    HorizonSample,
    build_sample,
    class_sum,
    long_difference,
    side_totals,
)
from esdid.ingest import Panel


logger = logging.getLogger(__name__)

AVERAGE_TOTAL = "average_total"
SIDES = {"both": (SWITCH_IN, SWITCH_OUT), "in": (SWITCH_IN,), "out": (SWITCH_OUT,)}


@dataclass(frozen=True)
class EffectEstimate:
    kind: str
    horizon: int
    point: float
    variance: float
    n_weight: float
    switchers: int
    ci_low: float = math.nan
    ci_high: float = math.nan

    @property
    def se(self) -> float:
        return math.sqrt(self.variance) if self.variance >= 0 else math.nan

    @property
    def label(self) -> str:
        return AVERAGE_TOTAL if self.kind == AVERAGE_TOTAL else f"{self.kind}_{self.horizon}"

    def to_dict(self) -> dict:
        record = asdict(self)
        record["label"] = self.label
        record["se"] = self.se
        return record


@dataclass(frozen=True)
class HorizonAggregate:
    kind: str
    horizon: int
    did_plus: float
    did_minus: float
    n_plus: float
    n_minus: float
    count_plus: int
    count_minus: int
    dose_plus: float
    dose_minus: float
    dose_abs: float

    @property
    def n_weight(self) -> float:
        return self.n_plus + self.n_minus

    @property
    def switchers(self) -> int:
        return self.count_plus + self.count_minus

    @property
    def did(self) -> float:
        if self.n_weight <= 0:
            return math.nan
        plus = self.n_plus * self.did_plus if self.n_plus > 0 else 0.0
        minus = self.n_minus * self.did_minus if self.n_minus > 0 else 0.0
        return (plus + minus) / self.n_weight

    @property
    def label(self) -> str:
        return f"{self.kind}_{self.horizon}"


@dataclass(frozen=True)
class DoseDeltas:
    horizons: tuple[int, ...]
    dose_plus: np.ndarray
    dose_minus: np.ndarray
    dose_abs: np.ndarray
    w_plus_l: np.ndarray
    w_minus_l: np.ndarray
    w_plus: float
    delta_plus: float
    delta_minus: float
    delta: float


def did_gl(sample: HorizonSample, weight: np.ndarray, schedules: GroupSchedules) -> np.ndarray:
    """Group-level DID of each switcher in the sample, NaN for everyone else."""
    controlled = np.where(sample.control, weight * np.nan_to_num(sample.diff), 0.0)
    control_mean = np.divide(
        class_sum(controlled, schedules.comparison),
        sample.control_mass,
        out=np.zeros_like(sample.control_mass),
        where=sample.control_mass > 0,
    )
    values = np.where(sample.switcher, np.nan_to_num(sample.diff) - control_mean, 0.0)
    return np.where(sample.switchers, values.sum(axis=1), np.nan)


def cumulative_doses(schedules: GroupSchedules) -> np.ndarray:
    """delta^D_{g,l} attached to period F - 1 + l: sum of D_{F+k} - D1 for k < l."""
    periods = np.arange(1, schedules.n_periods + 1)
    post = periods[None, :] >= schedules.first_switch[:, None]
    steps = np.where(post, np.nan_to_num(schedules.doses - schedules.baseline[:, None]), 0.0)
    return np.cumsum(steps, axis=1)


def aggregate_sample(
    sample: HorizonSample,
    weight: np.ndarray,
    schedules: GroupSchedules,
    switchers: str = "both",
    cumulative: np.ndarray | None = None,
) -> HorizonAggregate:
    dids = np.nan_to_num(did_gl(sample, weight, schedules))
    cumulative = cumulative_doses(schedules) if cumulative is None else cumulative
    change = np.nan_to_num(schedules.doses - schedules.baseline[:, None])
    stats: dict[int, tuple[float, float, int, float]] = {}
    abs_dose = 0.0
    for side in (SWITCH_IN, SWITCH_OUT):
        totals = side_totals(sample, weight, schedules, side)
        if side not in SIDES[switchers] or totals.mass <= 0:
            stats[side] = (math.nan, 0.0, 0, math.nan)
            continue
        cell_weight = np.where(totals.mask, weight, 0.0)
        row_weight = cell_weight.sum(axis=1)
        did = side * float((row_weight * dids).sum()) / totals.mass
        dose = side * float((cell_weight * change).sum()) / totals.mass
        abs_dose += float((cell_weight * np.abs(cumulative)).sum())
        stats[side] = (did, totals.mass, totals.count, dose)
    mass = stats[SWITCH_IN][1] + stats[SWITCH_OUT][1]
    return HorizonAggregate(
        kind=sample.kind,
        horizon=sample.horizon,
        did_plus=stats[SWITCH_IN][0],
        did_minus=stats[SWITCH_OUT][0],
        n_plus=stats[SWITCH_IN][1],
        n_minus=stats[SWITCH_OUT][1],
        count_plus=stats[SWITCH_IN][2],
        count_minus=stats[SWITCH_OUT][2],
        dose_plus=stats[SWITCH_IN][3],
        dose_minus=stats[SWITCH_OUT][3],
        dose_abs=abs_dose / mass if mass > 0 else math.nan,
    )


def effect_samples(
    diff_for: Callable[[str, int], np.ndarray],
    weight: np.ndarray,
    schedules: GroupSchedules,
    horizons: int,
    eligible: np.ndarray | None = None,
) -> list[HorizonSample]:
    return [
        build_sample(diff_for(EFFECT, h), weight, schedules, h, EFFECT, eligible=eligible)
        for h in range(1, horizons + 1)
    ]


def placebo_samples(
    diff_for: Callable[[str, int], np.ndarray],
    weight: np.ndarray,
    schedules: GroupSchedules,
    effects: list[HorizonSample],
    count: int,
    eligible: np.ndarray | None = None,
) -> list[HorizonSample]:
    """Mirrored pre-switch comparisons, restricted to the switchers of the matching effect."""
    if count > len(effects):
        raise UsageError(
            f"placebos: the number of placebos requested cannot be larger than the number of effects ({count} > {len(effects)})"
        )
    return [
        build_sample(diff_for(PLACEBO, h), weight, schedules, h, PLACEBO, eligible=eligible, within=effects[h - 1])
        for h in range(1, count + 1)
    ]


def aggregate_effects(
    samples: list[HorizonSample],
    weight: np.ndarray,
    schedules: GroupSchedules,
    switchers: str = "both",
) -> list[HorizonAggregate]:
    cumulative = cumulative_doses(schedules)
    aggregates = [aggregate_sample(s, weight, schedules, switchers, cumulative) for s in samples]
    if samples and samples[0].kind == EFFECT and all(a.n_weight <= 0 for a in aggregates):
        raise EstimationError("no estimable switcher at any requested horizon")
    for aggregate in aggregates:
        logger.debug(
            "estimate=%s switchers_in=%s switchers_out=%s did=%s",
            aggregate.label,
            aggregate.count_plus,
            aggregate.count_minus,
            aggregate.did,
        )
    return aggregates


def average_total_effect(aggregates: list[HorizonAggregate]) -> DoseDeltas:
    """Dose-weighted effect per unit of treatment over the estimated horizons."""
    n_plus = np.array([a.n_plus for a in aggregates])
    n_minus = np.array([a.n_minus for a in aggregates])
    did_plus = np.nan_to_num(np.array([a.did_plus for a in aggregates]))
    did_minus = np.nan_to_num(np.array([a.did_minus for a in aggregates]))
    dose_plus = np.nan_to_num(np.array([a.dose_plus for a in aggregates]))
    dose_minus = np.nan_to_num(np.array([a.dose_minus for a in aggregates]))
    w_plus_l = n_plus / n_plus.sum() if n_plus.sum() > 0 else np.zeros_like(n_plus)
    w_minus_l = n_minus / n_minus.sum() if n_minus.sum() > 0 else np.zeros_like(n_minus)

    def ratio(weights, dids, doses, side):
        denominator = float((weights * doses).sum())
        if weights.sum() <= 0:
            return math.nan
        if denominator == 0:
            logger.warning("average_total_effect side=%s zero dose denominator", side)
            return math.nan
        return float((weights * dids).sum()) / denominator

    delta_plus = ratio(w_plus_l, did_plus, dose_plus, "in")
    delta_minus = ratio(w_minus_l, did_minus, dose_minus, "out")
    mass_plus = float((n_plus * dose_plus).sum())
    mass_minus = float((n_minus * dose_minus).sum())
    if math.isnan(delta_minus):
        w_plus = 1.0
    elif math.isnan(delta_plus):
        w_plus = 0.0
    else:
        w_plus = mass_plus / (mass_plus + mass_minus)
    parts = [w for w, d in ((w_plus, delta_plus), (1.0 - w_plus, delta_minus)) if w > 0 and math.isnan(d)]
    if parts or (math.isnan(delta_plus) and math.isnan(delta_minus)):
        delta = math.nan
    else:
        delta = w_plus * np.nan_to_num(delta_plus) + (1.0 - w_plus) * np.nan_to_num(delta_minus)
    return DoseDeltas(
        horizons=tuple(a.horizon for a in aggregates),
        dose_plus=dose_plus,
        dose_minus=dose_minus,
        dose_abs=np.array([a.dose_abs for a in aggregates]),
        w_plus_l=w_plus_l,
        w_minus_l=w_minus_l,
        w_plus=w_plus,
        delta_plus=delta_plus,
        delta_minus=delta_minus,
        delta=float(delta),
    )


def normalize(aggregates: list[HorizonAggregate], dids: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """DID^n_l = DID_l / delta^D_l; missing when the dose is zero."""
    doses = np.array([a.dose_abs for a in aggregates])
    dids = np.array([a.did for a in aggregates]) if dids is None else dids
    usable = np.nan_to_num(doses) > 0
    for aggregate, ok in zip(aggregates, usable):
        if not ok:
            logger.warning("estimate=%s normalized effect missing: zero average dose", aggregate.label)
    return np.where(usable, dids / np.where(usable, doses, 1.0), np.nan), doses


def trends_lin_transform(panel: Panel) -> Panel:
    """Replace outcomes and controls by their first differences; period one becomes missing."""
    outcome = long_difference(panel.outcome, 1)
    controls = long_difference(panel.controls, 1)
    weight = np.where(np.isnan(outcome), 0.0, panel.weight)
    return replace(panel, outcome=np.where(weight > 0, outcome, np.nan), weight=weight, controls=controls)


def cumulate(aggregates: list[HorizonAggregate]) -> list[HorizonAggregate]:
    """Levels effects as running sums of first-difference effects."""
    out = []
    plus = minus = 0.0
    for aggregate in aggregates:
        plus += np.nan_to_num(aggregate.did_plus)
        minus += np.nan_to_num(aggregate.did_minus)
        out.append(
            replace(
                aggregate,
                did_plus=plus if aggregate.n_plus > 0 else math.nan,
                did_minus=minus if aggregate.n_minus > 0 else math.nan,
            )
        )
    return out


def cumulative_did(aggregates: list[HorizonAggregate]) -> np.ndarray:
    return np.cumsum(np.nan_to_num([a.did for a in aggregates]))
