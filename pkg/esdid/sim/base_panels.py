"""Synthetic stand-ins for the three seed datasets of the coverage simulations.

Shapes, treatment timing and missingness mimic the original datasets;
first-difference pools come from fixed normal mixtures.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
import logging

import numpy as np


logger = logging.getLogger(__name__)

UNION = "union"
DIVORCE = "divorce"
DIVORCE_ONE_PER_COHORT = "divorce_one_per_cohort"
NEWSPAPER = "newspaper"

# 1969..1985 adopters; padded from 25 listed adopters to the 30 treated states
DIVORCE_ADOPTIONS = {1969: 1, 1970: 2, 1971: 8, 1972: 3, 1973: 10, 1974: 2, 1975: 1, 1976: 1, 1977: 1, 1985: 1}


@dataclass(frozen=True)
class BasePanel:
    name: str
    period_labels: tuple[int, ...]
    treatment: np.ndarray
    y1: np.ndarray
    pool: np.ndarray
    outcome_missing: np.ndarray
    status: np.ndarray | None = None
    hours: np.ndarray | None = None
    married: np.ndarray | None = None
    educ: np.ndarray | None = None

    @property
    def n_groups(self) -> int:
        return self.treatment.shape[0]

    @property
    def n_periods(self) -> int:
        return self.treatment.shape[1]

    @property
    def switchers(self) -> np.ndarray:
        d = np.nan_to_num(self.treatment)
        return (d != d[:, :1]).any(axis=1)


def _mixture(rng: np.random.Generator, shape: tuple[int, ...], mean: float, sd: float, tail_sd: float, tail: float = 0.15) -> np.ndarray:
    wide = rng.random(shape) < tail
    return np.where(wide, rng.normal(0.0, tail_sd, shape), rng.normal(mean, sd, shape))


def _first_change(status: np.ndarray) -> np.ndarray:
    changed = status != status[:, :1]
    return np.where(changed.any(axis=1), np.argmax(changed, axis=1) + 1, status.shape[1] + 1)


@lru_cache(maxsize=None)
def union_panel(seed: int = 1980) -> BasePanel:
    """545 workers over 1980-1987, union status as a two-state Markov chain."""
    rng = np.random.default_rng(seed)
    n_groups, n_periods = 545, 8
    status = np.zeros((n_groups, n_periods), dtype=int)
    status[:, 0] = rng.random(n_groups) < 0.25
    for t in range(1, n_periods):
        flip = np.where(status[:, t - 1] == 1, rng.random(n_groups) < 0.2, rng.random(n_groups) < 0.08)
        status[:, t] = np.where(flip, 1 - status[:, t - 1], status[:, t - 1])
    first = _first_change(status)
    periods = np.arange(1, n_periods + 1)
    treatment = (periods[None, :] >= first[:, None]).astype(float)
    switcher = first <= n_periods

    hours = 2000 + 300 * rng.normal(size=(n_groups, 1)) + 150 * rng.normal(size=(n_groups, n_periods))
    hazard = np.where(switcher, 0.18, 0.06)
    married = np.zeros((n_groups, n_periods))
    married[:, 0] = rng.random(n_groups) < 0.15
    for t in range(1, n_periods):
        married[:, t] = np.maximum(married[:, t - 1], rng.random(n_groups) < hazard)
    educ = rng.choice([1, 2, 3], size=n_groups, p=[0.3, 0.45, 0.25])

    return BasePanel(
        name=UNION,
        period_labels=tuple(range(1980, 1988)),
        treatment=treatment,
        y1=rng.normal(1.45, 0.55, n_groups),
        pool=_mixture(rng, (n_groups, n_periods - 1), 0.07, 0.25, 0.7),
        outcome_missing=np.zeros((n_groups, n_periods), dtype=bool),
        status=status.astype(float),
        hours=hours,
        married=married,
        educ=educ.astype(float),
    )


def _absorbing(adoption_years: list[int], n_never: int, labels: tuple[int, ...]) -> np.ndarray:
    years = np.array(adoption_years + [labels[-1] + 1] * n_never)
    return (np.array(labels)[None, :] >= years[:, None]).astype(float)


@lru_cache(maxsize=None)
def divorce_panel(one_per_cohort: bool = False, seed: int = 1956) -> BasePanel:
    """40 states over 1956-1986: 30 adopt an absorbing binary treatment, 10 never do."""
    rng = np.random.default_rng(seed)
    labels = tuple(range(1956, 1987))
    if one_per_cohort:
        adoption = list(range(1957, 1987))
    else:
        adoption = [year for year, count in DIVORCE_ADOPTIONS.items() for _ in range(count)]
    treatment = _absorbing(adoption, 10, labels)
    n_groups, n_periods = treatment.shape
    return BasePanel(
        name=DIVORCE_ONE_PER_COHORT if one_per_cohort else DIVORCE,
        period_labels=labels,
        treatment=treatment,
        y1=rng.normal(3.5, 1.2, n_groups),
        pool=_mixture(rng, (n_groups, n_periods - 1), 0.05, 0.3, 0.8),
        outcome_missing=np.zeros((n_groups, n_periods), dtype=bool),
    )


@lru_cache(maxsize=None)
def newspaper_panel(seed: int = 1900, n_missing: int = 321) -> BasePanel:
    """1195 counties over eight elections: newspapers capped at 4, one change at most."""
    rng = np.random.default_rng(seed)
    n_groups, n_periods = 1195, 8
    treatment = np.zeros((n_groups, n_periods))
    treatment[:, 0] = np.minimum(rng.poisson(1.6, n_groups), 4)
    changed = np.zeros(n_groups, dtype=bool)
    for t in range(1, n_periods):
        step = rng.choice([-2, -1, 1, 2], size=n_groups)
        proposal = np.clip(treatment[:, t - 1] + step, 0, 4)
        move = ~changed & (rng.random(n_groups) < 0.07) & (proposal != treatment[:, t - 1])
        treatment[:, t] = np.where(move, proposal, treatment[:, t - 1])
        changed |= move

    cells = rng.choice(n_groups * n_periods, size=n_missing, replace=False)
    rows, cols = np.divmod(cells, n_periods)
    half = n_missing // 2
    treatment[rows[:half], cols[:half]] = np.nan
    outcome_missing = np.zeros((n_groups, n_periods), dtype=bool)
    outcome_missing[rows[half:], cols[half:]] = True
    return BasePanel(
        name=NEWSPAPER,
        period_labels=tuple(range(1900, 1929, 4)),
        treatment=treatment,
        y1=np.clip(rng.normal(0.6, 0.15, n_groups), 0.05, 0.99),
        pool=_mixture(rng, (n_groups, n_periods - 1), 0.0, 0.06, 0.15),
        outcome_missing=outcome_missing,
    )


def load_base_panel(name: str) -> BasePanel:
    if name == UNION:
        return union_panel()
    if name == DIVORCE:
        return divorce_panel()
    if name == DIVORCE_ONE_PER_COHORT:
        return divorce_panel(one_per_cohort=True)
    if name == NEWSPAPER:
        return newspaper_panel()
    raise ValueError(f"Unsupported base panel: {name}")
