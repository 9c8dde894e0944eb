from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import logging
import math
from typing import Callable

import numpy as np
import pandas as pd
import scipy.linalg
import scipy.stats

from esdid.errors import EsdidError
from esdid.influence import covariance
from esdid.ingest import CLUSTER, GROUP


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class WaldResult:
    statistic: float
    df: int
    p_value: float

    def to_dict(self) -> dict:
        return {"statistic": self.statistic, "df": self.df, "p_value": self.p_value}


@dataclass(frozen=True)
class BootstrapResult:
    se: dict[str, float]
    replications: int
    failures: int


def difference_matrix(n_effects: int) -> np.ndarray:
    """[I_{L-1}, 0] - (1/L) 1 1': contrasts of each effect against the mean."""
    if n_effects < 2:
        raise ValueError(f"Unsupported number of effects for an equality test: {n_effects}")
    selector = np.eye(n_effects - 1, n_effects)
    return selector - np.ones((n_effects - 1, n_effects)) / n_effects


def wald_test(vector: np.ndarray, cov: np.ndarray) -> WaldResult:
    """vector' cov^{-1} vector against chi2(len(vector)); pseudo-inverse when singular."""
    df = vector.size
    rank = int(np.linalg.matrix_rank(cov)) if cov.size else 0
    if rank < df:
        logger.warning("wald covariance singular rank=%s dimension=%s, using pseudo-inverse", rank, df)
        inverse = scipy.linalg.pinvh(cov)
        df = rank
    else:
        inverse = scipy.linalg.inv(cov)
    statistic = float(vector @ inverse @ vector)
    statistic = max(statistic, 0.0)
    p_value = float(scipy.stats.chi2.sf(statistic, df)) if df > 0 else math.nan
    return WaldResult(statistic=statistic, df=df, p_value=p_value)


def effects_equal_test(points: np.ndarray, rows_var: np.ndarray, units: np.ndarray, n_groups: int) -> WaldResult:
    """H0: all selected effects are equal. ``rows_var`` is G x L."""
    contrast = difference_matrix(points.size)
    sigma = covariance(rows_var, units, n_groups)
    return wald_test(contrast @ points, contrast @ sigma @ contrast.T)


def placebo_joint_test(points: np.ndarray, rows_var: np.ndarray, units: np.ndarray, n_groups: int) -> WaldResult:
    """H0: all placebos are zero."""
    return wald_test(points, covariance(rows_var, units, n_groups))


def confidence_interval(point: float, variance: float, level: float = 0.95) -> tuple[float, float]:
    if variance < 0:
        raise ValueError(f"Unsupported negative variance: {variance}")
    if math.isnan(point) or math.isnan(variance):
        return math.nan, math.nan
    z = float(scipy.stats.norm.ppf(1 - (1 - level) / 2))
    half = z * math.sqrt(variance)
    return point - half, point + half


def resample_cells(cells: pd.DataFrame, rng: np.random.Generator, clustered: bool) -> pd.DataFrame:
    """Draw clusters (or groups) with replacement; each draw becomes a distinct unit."""
    level = CLUSTER if clustered else GROUP
    units = pd.Index(pd.unique(cells[level])).sort_values()
    draws = rng.integers(0, units.size, size=units.size)
    by_unit = {unit: frame for unit, frame in cells.groupby(level, sort=True)}
    pieces = []
    for k, index in enumerate(draws):
        piece = by_unit[units[index]].copy()
        piece[GROUP] = piece[GROUP].astype(str) + f"#{k}"
        if clustered:
            piece[CLUSTER] = k
        pieces.append(piece)
    out = pd.concat(pieces, ignore_index=True)
    out.attrs = dict(cells.attrs)
    return out


def bootstrap(
    estimate: Callable[[pd.DataFrame], dict[str, float]],
    cells: pd.DataFrame,
    replications: int,
    seed: int,
    clustered: bool = False,
    threads: int = 1,
) -> BootstrapResult:
    """Standard deviation of re-estimated points over cluster resamples.

    Replication k draws from SeedSequence(seed, spawn_key=(k,)), so results do
    not depend on the thread count.
    """
    if replications < 2:
        raise ValueError(f"Unsupported number of bootstrap replications: {replications}")

    def one(index: int) -> dict[str, float] | None:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))
        sample = resample_cells(cells, rng, clustered)
        try:
            return estimate(sample)
        except EsdidError as exc:
            logger.warning("bootstrap replication=%s skipped reason=%s", index, exc)
            return None

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(one, range(replications)))
    kept = [r for r in results if r is not None]
    failures = len(results) - len(kept)
    labels = sorted({label for r in kept for label in r})
    se = {}
    for label in labels:
        values = np.array([r[label] for r in kept if label in r and not math.isnan(r[label])])
        se[label] = float(np.std(values, ddof=1)) if values.size >= 2 else math.nan
    logger.info("bootstrap replications=%s failures=%s", replications, failures)
    return BootstrapResult(se=se, replications=len(kept), failures=failures)
