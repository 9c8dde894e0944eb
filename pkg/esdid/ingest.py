from __future__ import annotations

from dataclasses import asdict, dataclass, field
import logging
from pathlib import Path

import numpy as np
import pandas as pd

from esdid.config import EstimationOptions
from esdid.errors import InputError, UsageError


logger = logging.getLogger(__name__)

GROUP = "group"
PERIOD = "period"
OUTCOME = "Y"
TREATMENT = "D"
WEIGHT = "weight"
MASS = "N"
CLUSTER = "cluster"
SUPERGROUP = "supergroup"
BY = "by"

RESERVED = (GROUP, PERIOD, OUTCOME, TREATMENT, WEIGHT, MASS, CLUSTER, SUPERGROUP, BY)
GROUP_LEVEL = (CLUSTER, SUPERGROUP, BY)


@dataclass(frozen=True)
class AuditEntry:
    group: object
    period: int
    rule: str
    action: str
    before: float | None = None
    after: float | None = None

    def to_line(self) -> str:
        values = ""
        if self.action == "impute_treatment":
            values = f" before={self.before} after={self.after}"
        return f"group={self.group} period={self.period} rule={self.rule} action={self.action}{values}"


@dataclass
class AuditLog:
    policy: str
    entries: list[AuditEntry] = field(default_factory=list)

    def add(self, entry: AuditEntry) -> None:
        self.entries.append(entry)

    def __len__(self) -> int:
        return len(self.entries)

    def to_lines(self) -> list[str]:
        return [f"policy={self.policy}"] + [entry.to_line() for entry in self.entries]

    def to_records(self) -> list[dict]:
        records = []
        for entry in self.entries:
            record = asdict(entry)
            record["group"] = _plain(record["group"])
            records.append(record)
        return records

    def count(self, rule: str) -> int:
        return sum(1 for entry in self.entries if entry.rule == rule)


@dataclass(frozen=True)
class Panel:
    """Dense (group x period) view of the collapsed cells.

    Missing outcomes and treatments are NaN; ``weight`` is 0 wherever the
    outcome is missing or the cell is absent.
    """

    groups: pd.Index
    period_labels: tuple
    outcome: np.ndarray
    treatment: np.ndarray
    weight: np.ndarray
    controls: np.ndarray
    control_names: tuple[str, ...] = ()
    cluster: np.ndarray | None = None
    supergroup: np.ndarray | None = None

    @property
    def n_groups(self) -> int:
        return self.outcome.shape[0]

    @property
    def n_periods(self) -> int:
        return self.outcome.shape[1]


def _plain(value):
    if isinstance(value, np.generic):
        return value.item()
    return value


def _coerce_numeric(frame: pd.DataFrame, column: str, label: str) -> pd.Series:
    values = frame[column]
    coerced = pd.to_numeric(values, errors="coerce")
    bad = values.notna() & coerced.isna()
    if bad.any():
        position = int(np.flatnonzero(bad.to_numpy())[0])
        raise InputError(
            f"non-numeric {label} value {values.iloc[position]!r} in row {position + 2}"
        )
    return coerced.astype(float)


def standardize_rows(frame: pd.DataFrame, options: EstimationOptions, predictors: tuple[str, ...] = ()) -> pd.DataFrame:
    bindings = {
        options.group: GROUP,
        options.period: PERIOD,
        options.outcome: OUTCOME,
        options.treatment: TREATMENT,
    }
    optional = {options.weight: WEIGHT, options.cluster: CLUSTER, options.by: BY}
    wanted = list(bindings) + [name for name in optional if name] + list(options.controls)
    wanted += list(options.trends_nonparam) + list(predictors)
    missing = [name for name in dict.fromkeys(wanted) if name not in frame.columns]
    if missing:
        raise InputError(f"input is missing columns {missing}")
    clash = [name for name in tuple(options.controls) + tuple(predictors) if name in RESERVED]
    if clash:
        raise UsageError(f"control or predictor columns {clash} collide with reserved names {RESERVED}")

    rows = pd.DataFrame(index=frame.index)
    rows[GROUP] = frame[options.group]
    if rows[GROUP].isna().any():
        raise InputError(f"missing group id in row {int(np.flatnonzero(rows[GROUP].isna())[0]) + 2}")
    rows[PERIOD] = _coerce_numeric(frame, options.period, "period")
    if rows[PERIOD].isna().any():
        raise InputError(f"missing period in row {int(np.flatnonzero(rows[PERIOD].isna())[0]) + 2}")
    rows[OUTCOME] = _coerce_numeric(frame, options.outcome, "outcome")
    rows[TREATMENT] = _coerce_numeric(frame, options.treatment, "treatment")
    if options.weight:
        rows[WEIGHT] = _coerce_numeric(frame, options.weight, "weight")
        negative = rows[WEIGHT] < 0
        if negative.any():
            raise InputError(f"negative weight in row {int(np.flatnonzero(negative)[0]) + 2}")
        rows[WEIGHT] = rows[WEIGHT].fillna(0.0)
    for name in options.controls:
        rows[name] = _coerce_numeric(frame, name, f"control {name}")
    for name in predictors:
        if name not in rows:
            rows[name] = _coerce_numeric(frame, name, f"predictor {name}")
    if options.cluster:
        rows[CLUSTER] = frame[options.cluster]
    if options.trends_nonparam:
        keys = frame[list(options.trends_nonparam)]
        rows[SUPERGROUP] = keys.groupby(list(options.trends_nonparam), dropna=False, sort=True).ngroup()
    if options.by:
        rows[BY] = frame[options.by]
    return rows.reset_index(drop=True)


def read_panel_csv(path: str, options: EstimationOptions, predictors: tuple[str, ...] = ()) -> pd.DataFrame:
    source = Path(path)
    if not source.exists():
        raise InputError(f"input file not found: {path}")
    try:
        frame = pd.read_csv(source, encoding="utf-8", keep_default_na=False, na_values=[""])
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    rows = standardize_rows(frame, options, predictors)
    logger.info("input=%s rows=%s groups=%s", path, len(rows), rows[GROUP].nunique())
    return rows


def _weighted_value(frame: pd.DataFrame, column: str, keys: list[str]) -> pd.Series:
    w = frame["_w"]
    value = frame[column]
    has_y = frame[OUTCOME].notna()
    primary = has_y & value.notna()
    fallback = value.notna()
    parts = pd.DataFrame(
        {
            "num": (w * value).where(primary, 0.0),
            "den": w.where(primary, 0.0),
            "fnum": (w * value).where(fallback, 0.0),
            "fden": w.where(fallback, 0.0),
            "fsum": value.where(fallback, 0.0),
            "fcnt": fallback.astype(float),
        }
    )
    sums = parts.groupby([frame[k] for k in keys], sort=True).sum()
    out = np.where(
        sums["den"] > 0,
        sums["num"] / sums["den"].where(sums["den"] > 0, 1.0),
        np.where(
            sums["fden"] > 0,
            sums["fnum"] / sums["fden"].where(sums["fden"] > 0, 1.0),
            np.where(sums["fcnt"] > 0, sums["fsum"] / sums["fcnt"].where(sums["fcnt"] > 0, 1.0), np.nan),
        ),
    )
    return pd.Series(out, index=sums.index)


def collapse(rows: pd.DataFrame, weight_column_present: bool = True, controls: tuple[str, ...] = ()) -> pd.DataFrame:
    """Aggregate raw rows into one cell per (group, period).

    Outcome, treatment and controls are weighted means over rows with a
    non-missing outcome; N is the matching weight sum. A cell whose rows all
    miss the outcome keeps its treatment (weighted over rows observing it)
    with N = 0.
    """
    if rows.empty:
        raise InputError("no rows to collapse")
    if weight_column_present and WEIGHT in rows:
        weights = rows[WEIGHT].astype(float)
    elif weight_column_present and MASS in rows:
        weights = rows[MASS].astype(float)
    else:
        weights = pd.Series(1.0, index=rows.index)
    if (weights < 0).any():
        raise InputError(f"negative weight in row {int(np.flatnonzero(weights < 0)[0]) + 2}")

    keys = [GROUP, PERIOD]
    frame = rows.assign(_w=weights)
    has_y = frame[OUTCOME].notna()
    grouped = frame.groupby(keys, sort=True)
    mass = (frame["_w"].where(has_y, 0.0)).groupby([frame[k] for k in keys], sort=True).sum()
    y_num = (frame["_w"] * frame[OUTCOME]).where(has_y, 0.0).groupby([frame[k] for k in keys], sort=True).sum()

    cells = pd.DataFrame(index=mass.index)
    cells[OUTCOME] = np.where(mass > 0, y_num / mass.where(mass > 0, 1.0), np.nan)
    cells[TREATMENT] = _weighted_value(frame, TREATMENT, keys)
    cells[MASS] = mass.astype(float)
    for name in controls:
        cells[name] = _weighted_value(frame, name, keys)
    for name in GROUP_LEVEL:
        if name in frame:
            cells[name] = grouped[name].first()
    extra = [c for c in rows.columns if c not in RESERVED and c not in controls and c != "_w"]
    for name in extra:
        cells[name] = grouped[name].first()
    cells = cells.reset_index()
    cells.attrs = dict(rows.attrs)
    return cells


def rebase_periods(cells: pd.DataFrame) -> pd.DataFrame:
    labels = np.sort(cells[PERIOD].unique())
    ranks = np.searchsorted(labels, cells[PERIOD].to_numpy()) + 1
    out = cells.assign(**{PERIOD: ranks.astype(int)})
    out.attrs = dict(cells.attrs)
    out.attrs["period_labels"] = tuple(_plain(v) for v in labels)
    return out


def _treatment_grid(cells: pd.DataFrame) -> tuple[pd.Index, np.ndarray, np.ndarray]:
    groups = pd.Index(pd.unique(cells[GROUP])).sort_values()
    n_periods = int(cells[PERIOD].max())
    gi = groups.get_indexer(cells[GROUP])
    ti = cells[PERIOD].to_numpy(dtype=int) - 1
    treatment = np.full((len(groups), n_periods), np.nan)
    treatment[gi, ti] = cells[TREATMENT].to_numpy(dtype=float)
    outcome_seen = np.zeros((len(groups), n_periods), dtype=bool)
    outcome_seen[gi, ti] = cells[OUTCOME].notna().to_numpy() & (cells[MASS].to_numpy() > 0)
    return groups, treatment, outcome_seen


def _liberal_actions(d: np.ndarray, seen: np.ndarray, tolerance: float) -> list[tuple[int, str, str, float | None]]:
    observed = ~np.isnan(d)
    idx = np.arange(d.size)
    first = int(np.argmax(observed))
    base = d[first]
    changed = observed & (np.abs(np.nan_to_num(d - base)) > tolerance) & (idx > first)
    actions = [(t, "outcome_before_first_treatment", "drop_outcome", None) for t in idx[(idx < first) & seen]]
    if changed.any():
        switch = int(np.argmax(changed))
        last_before = int(idx[observed & (idx < switch)].max())
        for t in idx[(idx > first) & (idx < last_before) & ~observed]:
            actions.append((t, "switcher_baseline_gap", "impute_treatment", base))
        if last_before < switch - 1:
            for t in idx[(idx > last_before) & seen]:
                actions.append((t, "unknown_switch_date", "drop_outcome", None))
        for t in idx[(idx > switch) & ~observed]:
            actions.append((t, "switcher_after_switch", "impute_treatment", d[switch]))
    else:
        last = int(idx[observed].max())
        for t in idx[(idx > first) & (idx < last) & ~observed]:
            actions.append((t, "never_switcher_gap", "impute_treatment", base))
        for t in idx[(idx > last) & seen]:
            actions.append((t, "outcome_after_last_treatment", "drop_outcome", None))
    return actions


def _conservative_start(d: np.ndarray, seen: np.ndarray, tolerance: float) -> int | None:
    observed = ~np.isnan(d)
    idx = np.arange(d.size)
    first = int(np.argmax(observed))
    changed = observed & (np.abs(np.nan_to_num(d - d[first])) > tolerance) & (idx > first)
    switch = int(np.argmax(changed)) if changed.any() else d.size
    seen_so_far = np.cumsum(seen) > 0
    candidates = idx[~observed & (idx < switch) & seen_so_far]
    return int(candidates[0]) if candidates.size else None


def apply_missing_treatment_rules(
    cells: pd.DataFrame,
    policy: str = "liberal",
    tolerance: float = 0.0,
) -> tuple[pd.DataFrame, AuditLog]:
    if policy not in ("liberal", "conservative"):
        raise ValueError(f"Unsupported missing policy: {policy}")
    audit = AuditLog(policy=policy)
    attrs = dict(cells.attrs)
    cells = cells.sort_values([GROUP, PERIOD]).reset_index(drop=True)
    cells.attrs = attrs
    groups, treatment, seen = _treatment_grid(cells)
    if not np.isnan(treatment).any():
        return cells, audit

    position = {key: i for i, key in enumerate(zip(cells[GROUP], cells[PERIOD]))}
    drop_rows: set[int] = set()
    drop_outcome: set[int] = set()
    imputed: dict[int, float] = {}

    for g, group in enumerate(groups):
        d = treatment[g]
        if not np.isnan(d).any():
            continue
        present = [position[(group, t + 1)] for t in range(d.size) if (group, t + 1) in position]
        if np.isnan(d).all():
            drop_rows.update(present)
            for row in present:
                audit.add(AuditEntry(group, int(cells.at[row, PERIOD]), "no_treatment_observed", "drop_cell"))
            continue
        if policy == "conservative":
            start = _conservative_start(d, seen[g], tolerance)
            if start is None:
                continue
            for t in range(start, d.size):
                row = position.get((group, t + 1))
                if row is not None:
                    drop_rows.add(row)
                    audit.add(AuditEntry(group, t + 1, "missing_treatment_before_switch", "drop_cell"))
            continue
        for t, rule, action, value in _liberal_actions(d, seen[g], tolerance):
            row = position.get((group, int(t) + 1))
            if row is None:
                continue
            if action == "drop_outcome":
                drop_outcome.add(row)
                audit.add(AuditEntry(group, int(t) + 1, rule, action))
            else:
                imputed[row] = float(value)
                audit.add(AuditEntry(group, int(t) + 1, rule, action, before=None, after=float(value)))

    out = cells.copy()
    if imputed:
        rows = list(imputed)
        out.loc[rows, TREATMENT] = [imputed[r] for r in rows]
    if drop_outcome:
        rows = sorted(drop_outcome)
        out.loc[rows, OUTCOME] = np.nan
        out.loc[rows, MASS] = 0.0
    if drop_rows:
        out = out.drop(index=sorted(drop_rows))
    out = out.reset_index(drop=True)
    out.attrs = dict(cells.attrs)
    logger.info(
        "policy=%s imputed=%s outcomes_dropped=%s cells_dropped=%s",
        policy,
        len(imputed),
        len(drop_outcome),
        len(drop_rows),
    )
    return out, audit


def flag_missing_controls(cells: pd.DataFrame, controls: tuple[str, ...], audit: AuditLog) -> int:
    if not controls:
        return 0
    missing = cells[list(controls)].isna().any(axis=1) & cells[OUTCOME].notna() & cells[TREATMENT].notna()
    for group, period in zip(cells.loc[missing, GROUP], cells.loc[missing, PERIOD]):
        audit.add(AuditEntry(group, int(period), "missing_control", "exclude_from_control_terms"))
    if missing.any():
        logger.warning("cells_with_missing_controls=%s", int(missing.sum()))
    return int(missing.sum())


def group_level_values(cells: pd.DataFrame, column: str, groups: pd.Index) -> np.ndarray:
    observed = cells[[GROUP, column]].dropna()
    distinct = observed.groupby(GROUP)[column].nunique()
    varying = distinct[distinct > 1]
    if len(varying):
        raise InputError(f"{column} must be constant within group; group {varying.index[0]!r} varies")
    first = observed.groupby(GROUP)[column].first()
    values = first.reindex(groups)
    if values.isna().any():
        raise InputError(f"{column} is missing for group {values.index[values.isna()][0]!r}")
    return values.to_numpy()


def build_panel(
    cells: pd.DataFrame,
    controls: tuple[str, ...] = (),
    cluster: bool = False,
    supergroup: bool = False,
) -> Panel:
    groups = pd.Index(pd.unique(cells[GROUP])).sort_values()
    n_periods = int(cells[PERIOD].max())
    gi = groups.get_indexer(cells[GROUP])
    ti = cells[PERIOD].to_numpy(dtype=int) - 1
    shape = (len(groups), n_periods)

    outcome = np.full(shape, np.nan)
    outcome[gi, ti] = cells[OUTCOME].to_numpy(dtype=float)
    weight = np.zeros(shape)
    weight[gi, ti] = cells[MASS].to_numpy(dtype=float)
    weight = np.where(np.isnan(outcome), 0.0, weight)
    outcome = np.where(weight > 0, outcome, np.nan)
    treatment = np.full(shape, np.nan)
    treatment[gi, ti] = cells[TREATMENT].to_numpy(dtype=float)
    x = np.full(shape + (len(controls),), np.nan)
    for k, name in enumerate(controls):
        x[gi, ti, k] = cells[name].to_numpy(dtype=float)

    cluster_codes = None
    if cluster:
        cluster_codes = pd.factorize(group_level_values(cells, CLUSTER, groups), sort=True)[0]
    supergroup_codes = None
    if supergroup:
        supergroup_codes = pd.factorize(group_level_values(cells, SUPERGROUP, groups), sort=True)[0]

    labels = cells.attrs.get("period_labels", tuple(range(1, n_periods + 1)))
    return Panel(
        groups=groups,
        period_labels=tuple(labels),
        outcome=outcome,
        treatment=treatment,
        weight=weight,
        controls=x,
        control_names=tuple(controls),
        cluster=cluster_codes,
        supergroup=supergroup_codes,
    )
