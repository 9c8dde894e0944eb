from __future__ import annotations

from dataclasses import dataclass, field, fields
import json
import logging
import math
from pathlib import Path

import numpy as np
import pandas as pd

from esdid.config import EstimationOptions
from esdid.sim.base_panels import BasePanel, load_base_panel


logger = logging.getLogger(__name__)

TRENDS = ("quadratic", "quadratic_educ", "linear_quintile", "cluster_ar1")
DESIGNS = ("staggered", "status")
CLUSTER_SIZE = 10
N_CLUSTERS = 50


@dataclass(frozen=True)
class DgpSpec:
    """One row of a simulation grid: a base panel, an outcome model and estimator options."""

    name: str
    base_panel: str = "union"
    design: str = "staggered"
    trend: str = "quadratic"
    effect: float = 0.0
    controls_effect: bool = False
    n_groups: int | None = None
    replications: int = 500
    seed: int = 20240101
    options: dict = field(default_factory=dict)

    def validate(self) -> "DgpSpec":
        if self.trend not in TRENDS:
            raise ValueError(f"Unsupported trend: {self.trend}")
        if self.design not in DESIGNS:
            raise ValueError(f"Unsupported design: {self.design}")
        if self.effect and self.design != "staggered":
            raise ValueError(f"Unsupported effect on a {self.design} design: truths are defined for single-change designs")
        return self

    def estimation_options(self) -> EstimationOptions:
        known = {f.name for f in fields(EstimationOptions)}
        unknown = set(self.options) - known
        if unknown:
            raise ValueError(f"Unsupported estimation options in spec {self.name}: {sorted(unknown)}")
        values = {k: tuple(v) if isinstance(v, list) else v for k, v in self.options.items()}
        if self.trend == "cluster_ar1":
            values.setdefault("cluster", "cluster")
        if values.get("effects_equal") == "all":
            values["effects_equal"] = tuple(range(1, int(values.get("effects", 1)) + 1))
        return EstimationOptions(outcome="Y", group="G", period="T", treatment="D", **values).validate()


def load_specs(path: str) -> list[DgpSpec]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    entries = raw["specs"] if isinstance(raw, dict) else raw
    defaults = raw.get("defaults", {}) if isinstance(raw, dict) else {}
    return [DgpSpec(**{**defaults, **entry}).validate() for entry in entries]


def replication_rng(seed: int, rep: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(rep,)))


def _subsample(base: BasePanel, n_groups: int, rng: np.random.Generator) -> np.ndarray:
    switchers = np.flatnonzero(base.switchers)
    stayers = np.flatnonzero(~base.switchers)
    half = n_groups // 2
    picked = np.concatenate(
        [rng.choice(switchers, size=half, replace=False), rng.choice(stayers, size=n_groups - half, replace=False)]
    )
    return np.sort(picked)


def cluster_layout(base: BasePanel) -> tuple[np.ndarray, np.ndarray]:
    """Keep the 500 lowest period-one outcomes; cluster c holds ranks 10c..10c+9."""
    keep = np.argsort(base.y1, kind="mergesort")[: N_CLUSTERS * CLUSTER_SIZE]
    cluster = np.arange(keep.size) // CLUSTER_SIZE
    return keep, cluster


def cluster_shock_scale(base: BasePanel) -> float:
    """Standard deviation of Y2 - Y1, the scale of the cluster innovations."""
    return float(np.std(base.pool[:, 0], ddof=1))


def _cluster_terms(base: BasePanel, keep: np.ndarray, cluster: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n_periods = base.n_periods
    pool = base.pool[keep].reshape(N_CLUSTERS, CLUSTER_SIZE, n_periods - 1)
    donors = rng.integers(0, N_CLUSTERS, size=N_CLUSTERS)
    shocks = pool[donors].reshape(N_CLUSTERS * CLUSTER_SIZE, n_periods - 1)

    scale = cluster_shock_scale(base)
    innovations = rng.normal(0.0, scale, size=(N_CLUSTERS, n_periods))
    eta = np.zeros((N_CLUSTERS, n_periods))
    eta[:, 0] = innovations[:, 0]
    for t in range(1, n_periods):
        eta[:, t] = (eta[:, t - 1] + innovations[:, t]) / math.sqrt(2.0)
    return shocks, eta[cluster]


def _quintile_trend(y1: np.ndarray) -> np.ndarray:
    cuts = np.quantile(y1, [0.2, 0.4, 0.6, 0.8, 1.0])
    return (y1[:, None] > cuts[None, :]).sum(axis=1).astype(float)


def status_quo_outcomes(spec: DgpSpec, base: BasePanel, rows: np.ndarray, shocks: np.ndarray, extra: np.ndarray | None) -> np.ndarray:
    n_periods = base.n_periods
    t = np.arange(1, n_periods + 1, dtype=float)
    y = base.y1[rows][:, None] + np.concatenate([np.zeros((rows.size, 1)), np.cumsum(shocks, axis=1)], axis=1)
    if spec.trend == "quadratic_educ":
        y = y + t[None, :] ** 2 * base.educ[rows][:, None]
    else:
        y = y + t[None, :] ** 2
    if spec.trend == "linear_quintile":
        y = y + t[None, :] * _quintile_trend(base.y1)[rows][:, None]
    if extra is not None:
        y = y + extra
    if spec.controls_effect:
        sigma = float(np.std(base.y1, ddof=1))
        mu = float(base.hours.mean())
        y = y + sigma / mu * base.hours[rows] + 2 * sigma * base.married[rows]
    return y


def generate(spec: DgpSpec, rep: int) -> pd.DataFrame:
    """One synthetic long-format panel; replication ``rep`` of ``spec`` is reproducible."""
    base = load_base_panel(spec.base_panel)
    rng = replication_rng(spec.seed, rep)
    cluster = None
    extra = None
    if spec.trend == "cluster_ar1":
        rows, cluster = cluster_layout(base)
        shocks, extra = _cluster_terms(base, rows, cluster, rng)
    else:
        rows = _subsample(base, spec.n_groups, rng) if spec.n_groups else np.arange(base.n_groups)
        shocks = base.pool[rng.integers(0, base.n_groups, size=rows.size)]

    treatment = base.status if spec.design == "status" else base.treatment
    d = treatment[rows]
    y = status_quo_outcomes(spec, base, rows, shocks, extra)
    if spec.effect:
        y = y + spec.effect * (np.nan_to_num(d) - np.nan_to_num(d[:, :1]))
    y = np.where(base.outcome_missing[rows], np.nan, y)

    n_groups, n_periods = d.shape
    frame = pd.DataFrame(
        {
            "G": np.repeat(rows, n_periods),
            "T": np.tile(base.period_labels, n_groups),
            "Y": y.ravel(),
            "D": d.ravel(),
        }
    )
    if base.hours is not None:
        frame["hours"] = base.hours[rows].ravel()
        frame["married"] = base.married[rows].ravel()
        frame["educ"] = np.repeat(base.educ[rows], n_periods)
    if cluster is not None:
        frame["cluster"] = np.repeat(cluster, n_periods)
    return frame


def truths(spec: DgpSpec, labels: list[str]) -> dict[str, float]:
    """True values under a constant effect tau on D - D1 in single-change binary designs."""
    out = {}
    for label in labels:
        kind, _, horizon = label.rpartition("_")
        if "placebo" in kind:
            out[label] = 0.0
        elif kind == "normalized_effect":
            out[label] = spec.effect / int(horizon)
        else:
            out[label] = spec.effect
    return out


def intra_cluster_correlation(values: np.ndarray, cluster: np.ndarray) -> float:
    """One-way ANOVA ICC for equal-sized clusters."""
    frame = pd.DataFrame({"v": values, "c": cluster})
    sizes = frame.groupby("c")["v"].size()
    k = float(sizes.iloc[0])
    n_clusters = sizes.size
    grand = frame["v"].mean()
    means = frame.groupby("c")["v"].transform("mean")
    msb = k * ((frame.groupby("c")["v"].mean() - grand) ** 2).sum() / (n_clusters - 1)
    msw = ((frame["v"] - means) ** 2).sum() / (len(frame) - n_clusters)
    return float((msb - msw) / (msb + (k - 1) * msw))
