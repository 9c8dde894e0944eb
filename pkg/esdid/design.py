from __future__ import annotations

from dataclasses import dataclass, replace
import logging

import numpy as np
import pandas as pd

from esdid.errors import DesignRestrictionViolation, EstimationError
from esdid.horizons import HorizonSample, class_sum
from esdid.ingest import Panel


logger = logging.getLogger(__name__)

SWITCH_IN = 1
SWITCH_OUT = -1
NEVER = 0

CONTINUOUS_HINT = "the estimation can still be run with the continuous option"


@dataclass(frozen=True)
class GroupSchedules:
    """Per-group design facts.

    ``first_switch`` is 1-based and equals T + 1 for never-switchers.
    ``comparison`` holds the codes of the (baseline [, supergroup]) cells
    within which switchers are matched to not-yet-switchers.
    """

    groups: pd.Index
    baseline: np.ndarray
    first_switch: np.ndarray
    direction: np.ndarray
    comparison: np.ndarray
    baseline_key: np.ndarray
    supergroup: np.ndarray
    doses: np.ndarray
    last_control: np.ndarray
    dropped: np.ndarray
    n_periods: int

    @property
    def switchers(self) -> np.ndarray:
        return (self.direction != NEVER) & ~self.dropped

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "group": self.groups,
                "D1": self.baseline,
                "F": self.first_switch,
                "S": pd.Series(self.direction).map({SWITCH_IN: "in", SWITCH_OUT: "out", NEVER: "never"}).to_numpy(),
                "Tg": self.last_control,
                "supergroup": self.supergroup,
                "dropped": self.dropped,
            }
        )


def _codes(*columns: np.ndarray) -> np.ndarray:
    frame = pd.DataFrame({f"k{i}": column for i, column in enumerate(columns)})
    return frame.groupby(list(frame.columns), sort=True, dropna=False).ngroup().to_numpy()


def classify(panel: Panel, tolerance: float = 0.0, continuous: bool = False) -> GroupSchedules:
    treatment = panel.treatment
    n_groups, n_periods = treatment.shape
    observed = ~np.isnan(treatment)
    idx = np.arange(n_periods)
    first = np.argmax(observed, axis=1)
    baseline = treatment[np.arange(n_groups), first]
    gap = np.abs(np.nan_to_num(treatment - baseline[:, None]))
    changed = observed & (gap > tolerance) & (idx[None, :] > first[:, None])
    has_switch = changed.any(axis=1)
    switch_col = np.argmax(changed, axis=1)
    first_switch = np.where(has_switch, switch_col + 1, n_periods + 1)
    at_switch = treatment[np.arange(n_groups), np.minimum(switch_col, n_periods - 1)]
    direction = np.where(has_switch, np.sign(at_switch - baseline), NEVER).astype(int)

    # D at F carried forward over unobserved post-switch periods
    filled = pd.DataFrame(treatment).ffill(axis=1).to_numpy()
    post = idx[None, :] >= (first_switch - 1)[:, None]
    doses = np.where(post & ~observed, filled, treatment)
    carried = int((post & ~observed & ~np.isnan(filled)).sum())
    if carried:
        logger.info("post_switch_treatments_carried_forward=%s", carried)

    supergroup = panel.supergroup if panel.supergroup is not None else np.zeros(n_groups, dtype=int)
    baseline_key = np.zeros(n_groups, dtype=int) if continuous else _codes(baseline)
    comparison = _codes(baseline_key, supergroup)
    return GroupSchedules(
        groups=panel.groups,
        baseline=baseline,
        first_switch=first_switch.astype(int),
        direction=direction,
        comparison=comparison,
        baseline_key=baseline_key,
        supergroup=supergroup,
        doses=doses,
        last_control=np.full(n_groups, n_periods, dtype=int),
        dropped=np.zeros(n_groups, dtype=bool),
        n_periods=n_periods,
    )


def check_design_restriction_1(schedules: GroupSchedules) -> None:
    key = schedules.baseline_key
    frame = pd.DataFrame({"key": key, "F": schedules.first_switch})
    sizes = frame.groupby("key")["F"].size()
    shared = sizes[sizes > 1].index
    if len(shared) == 0:
        raise DesignRestrictionViolation(
            "design restriction 1 fails: no two groups share the same period-one treatment",
            CONTINUOUS_HINT,
        )
    distinct = frame[frame["key"].isin(shared)].groupby("key")["F"].nunique()
    if not (distinct > 1).any():
        raise DesignRestrictionViolation(
            "design restriction 1 fails: groups sharing a period-one treatment all first change "
            "treatment at the same date",
            CONTINUOUS_HINT,
        )


def _select_groups(panel: Panel, keep: np.ndarray) -> Panel:
    return replace(
        panel,
        groups=panel.groups[keep],
        outcome=panel.outcome[keep],
        treatment=panel.treatment[keep],
        weight=panel.weight[keep],
        controls=panel.controls[keep],
        cluster=None if panel.cluster is None else panel.cluster[keep],
        supergroup=None if panel.supergroup is None else panel.supergroup[keep],
    )


def enforce_design_restriction_2(
    panel: Panel,
    schedules: GroupSchedules,
    dont_drop_larger_lower: bool = False,
    tolerance: float = 0.0,
) -> Panel:
    """Drop cells from the first period where a group has been both above and below D1."""
    if dont_drop_larger_lower:
        return panel
    deviation = panel.treatment - schedules.baseline[:, None]
    above = np.maximum.accumulate(np.nan_to_num(deviation) > tolerance, axis=1)
    below = np.maximum.accumulate(np.nan_to_num(deviation) < -tolerance, axis=1)
    drop = above & below
    if not drop.any():
        return panel
    logger.warning(
        "design_restriction_2 groups=%s cells_dropped=%s",
        int(drop.any(axis=1).sum()),
        int((drop & ~np.isnan(panel.treatment)).sum()),
    )
    return replace(
        panel,
        outcome=np.where(drop, np.nan, panel.outcome),
        treatment=np.where(drop, np.nan, panel.treatment),
        weight=np.where(drop, 0.0, panel.weight),
        controls=np.where(drop[:, :, None], np.nan, panel.controls),
    )


def drop_no_first_stage(panel: Panel, schedules: GroupSchedules, tolerance: float = 0.0) -> Panel:
    """Remove switchers whose mean post-switch treatment equals their baseline."""
    periods = np.arange(1, schedules.n_periods + 1)
    post = (periods[None, :] >= schedules.first_switch[:, None]) & ~np.isnan(panel.treatment)
    total = np.where(post, panel.treatment, 0.0).sum(axis=1)
    count = post.sum(axis=1)
    mean_after = np.divide(total, count, out=np.full(count.shape, np.nan), where=count > 0)
    flat = (schedules.direction != NEVER) & (np.abs(mean_after - schedules.baseline) <= tolerance)
    if not flat.any():
        return panel
    logger.warning("no_first_stage_switchers_dropped=%s groups=%s", int(flat.sum()), list(panel.groups[flat][:10]))
    return _select_groups(panel, ~flat)


def compute_horizons_and_masses(
    panel: Panel,
    schedules: GroupSchedules,
) -> tuple[GroupSchedules, pd.DataFrame, int, int]:
    """T_g per comparison cell, control masses N^g_t and the largest horizons L_u, L_a."""
    n_classes = int(schedules.comparison.max()) + 1
    latest = np.zeros(n_classes, dtype=int)
    np.maximum.at(latest, schedules.comparison, schedules.first_switch - 1)
    last_control = latest[schedules.comparison]

    is_switcher = schedules.direction != NEVER
    dropped = is_switcher & (schedules.first_switch > last_control)
    if dropped.any():
        logger.warning("switchers_without_controls=%s", int(dropped.sum()))
    reach = last_control - schedules.first_switch + 1
    in_reach = reach[(schedules.direction == SWITCH_IN) & ~dropped]
    out_reach = reach[(schedules.direction == SWITCH_OUT) & ~dropped]
    l_u = int(in_reach.max()) if in_reach.size else 0
    l_a = int(out_reach.max()) if out_reach.size else 0

    switcher_classes = np.unique(schedules.comparison[is_switcher])
    idle = ~is_switcher & ~np.isin(schedules.comparison, switcher_classes)
    if idle.any():
        logger.info("never_switchers_without_matching_switchers=%s", int(idle.sum()))

    periods = np.arange(1, schedules.n_periods + 1)
    not_yet = schedules.first_switch[:, None] > periods[None, :]
    mass = class_sum(np.where(not_yet, panel.weight, 0.0), schedules.comparison)
    control_mass = pd.DataFrame(
        {
            "group": np.repeat(np.asarray(schedules.groups), schedules.n_periods),
            "period": np.tile(periods, len(schedules.groups)),
            "control_mass": mass.ravel(),
        }
    )
    updated = replace(schedules, last_control=last_control, dropped=dropped)
    return updated, control_mass, l_u, l_a


def truncate_effects(requested: int, l_u: int, l_a: int, switchers: str = "both") -> int:
    reach = {"both": max(l_u, l_a), "in": l_u, "out": l_a}[switchers]
    if reach < 1:
        raise EstimationError(f"no estimable switcher for switchers={switchers} (L_u={l_u}, L_a={l_a})")
    if requested > reach:
        logger.warning("effects_requested=%s effects_estimable=%s truncated", requested, reach)
    return min(requested, reach)


def apply_same_switchers(
    effect_samples: list[HorizonSample],
    placebo_samples: list[HorizonSample] | None = None,
) -> np.ndarray:
    """Switchers estimable at every requested effect (and placebo, when given)."""
    keep = np.logical_and.reduce([sample.switchers for sample in effect_samples])
    if placebo_samples:
        keep &= np.logical_and.reduce([sample.switchers for sample in placebo_samples])
    if not keep.any():
        counts = {sample.label: int(sample.switchers.sum()) for sample in effect_samples + list(placebo_samples or [])}
        raise EstimationError(f"no switcher is estimable at every requested horizon; per-horizon counts {counts}")
    return keep


def _format_value(value: float) -> str:
    return f"{value:.12g}"


def report_design_paths(
    schedules: GroupSchedules,
    sample: HorizonSample,
    weight: np.ndarray,
    coverage: float = 1.0,
) -> pd.DataFrame:
    """Treatment paths (D1, D_F, ..., D_{F-1+l}) of the switchers behind one effect."""
    rows = np.flatnonzero(sample.switchers)
    horizon = sample.horizon
    records = []
    for g in rows:
        start = schedules.first_switch[g] - 1
        path = (schedules.baseline[g],) + tuple(schedules.doses[g, start : start + horizon])
        target = start + horizon - 1
        records.append({"path": ",".join(_format_value(v) for v in path), "weight": weight[g, target]})
    if not records:
        return pd.DataFrame(columns=["path", "weight", "share", "cumulative_share"])
    table = (
        pd.DataFrame(records)
        .groupby("path", sort=True)["weight"]
        .sum()
        .reset_index()
        .sort_values(["weight", "path"], ascending=[False, True], kind="mergesort")
        .reset_index(drop=True)
    )
    table["share"] = table["weight"] / table["weight"].sum()
    table["cumulative_share"] = table["share"].cumsum()
    reached = np.flatnonzero(table["cumulative_share"].to_numpy() >= coverage - 1e-12)
    stop = int(reached[0]) + 1 if reached.size else len(table)
    return table.iloc[:stop].reset_index(drop=True)
