from __future__ import annotations

import numpy as np
import pandas as pd

from esdid.config import EstimationOptions
from esdid.pipeline import EstimationResult, estimate, prepare_frame


def long_frame(treatment: dict, outcome: dict | None = None, start: int = 1, **columns: dict) -> pd.DataFrame:
    """Long panel from per-group treatment (and outcome) sequences; outcome defaults to 5 * D."""
    records = []
    for group, path in treatment.items():
        ys = outcome[group] if outcome is not None else [5.0 * d for d in path]
        for t, (d, y) in enumerate(zip(path, ys)):
            record = {"G": group, "T": start + t, "Y": y, "D": d}
            for name, values in columns.items():
                value = values[group]
                record[name] = value[t] if isinstance(value, (list, tuple)) else value
            records.append(record)
    return pd.DataFrame(records)


def toy_frame() -> pd.DataFrame:
    """Two never-treated groups and two switchers (F = 3 and F = 2), Y = 5 * D."""
    return long_frame(
        {
            "A": [0, 0, 0, 0],
            "B": [0, 0, 0, 0],
            "C": [0, 0, 1, 1],
            "D": [0, 1, 1, 1],
        }
    )


def random_frame(
    seed: int,
    n_groups: int = 16,
    n_periods: int = 5,
    missing: float = 0.1,
) -> pd.DataFrame:
    """Two baselines, staggered first switches, one-sided treatment paths, gaps in Y."""
    rng = np.random.default_rng(seed)
    records = []
    for g in range(n_groups):
        base = float(g % 2)
        if g == 0:
            first = n_periods + 1
        elif g == 2:
            first = 3
        else:
            first = int(rng.integers(2, n_periods + 2))
        side = int(rng.choice([1, -1]))
        for t in range(1, n_periods + 1):
            d = base if t < first else base + side * int(rng.integers(1, 3))
            y = float(rng.normal(loc=0.3 * t, scale=1.0))
            if rng.random() < missing:
                y = np.nan
            records.append({"G": f"g{g:02d}", "T": 2000 + t, "Y": y, "D": d, "w": float(rng.uniform(0.5, 2.0))})
    return pd.DataFrame(records)


def options(**values) -> EstimationOptions:
    return EstimationOptions(**values).validate()


def run(frame: pd.DataFrame, **values) -> EstimationResult:
    opts = options(**values)
    cells, _ = prepare_frame(frame, opts)
    return estimate(cells, opts)


def randomized_frame(seed: int, missing: float = 0.1) -> pd.DataFrame:
    """``random_frame`` with a seed-dependent shape: 6-30 groups over 3-8 periods."""
    rng = np.random.default_rng([seed, 7])
    return random_frame(seed, n_groups=int(rng.integers(6, 31)), n_periods=int(rng.integers(3, 9)), missing=missing)
