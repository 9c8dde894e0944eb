import math

import numpy as np
import pandas as pd
import pytest

from esdid.config import EstimationOptions
from esdid.controls import fit_residualization, independent_columns
from esdid.design import classify
from esdid.ingest import build_panel
from esdid.pipeline import prepare_frame
from panels import run


def _confounded_frame(seed: int = 4, n_groups: int = 30, n_periods: int = 5) -> pd.DataFrame:
    """Y = 2x + group and period effects + 5D, with x shifted by 3 once treated."""
    rng = np.random.default_rng(seed)
    records = []
    period_effect = rng.normal(size=n_periods)
    for g in range(n_groups):
        first = n_periods + 1 if g < 10 else int(rng.integers(2, n_periods + 1))
        alpha = rng.normal()
        for t in range(1, n_periods + 1):
            d = float(t >= first)
            x = rng.normal() + 3.0 * d
            y = 2.0 * x + alpha + period_effect[t - 1] + 5.0 * d
            records.append({"G": g, "T": t, "Y": y, "D": d, "x": x, "x2": 2.0 * x})
    return pd.DataFrame(records)


def test_residualization_recovers_theta():
    frame = _confounded_frame()
    options = EstimationOptions(controls=("x",))
    cells, _ = prepare_frame(frame, options)
    panel = build_panel(cells, options.controls)

    fit = fit_residualization(panel, classify(panel), key=0)

    np.testing.assert_allclose(fit.theta, [2.0], rtol=1e-9)
    assert fit.dropped == ()
    assert fit.mass > 0


def test_controls_remove_confounding():
    frame = _confounded_frame()

    naive = run(frame, effects=2)
    adjusted = run(frame, effects=2, controls=("x",))

    assert naive.get("effect_1").point > 8.0
    assert adjusted.get("effect_1").point == pytest.approx(5.0, abs=1e-8)
    assert adjusted.get("effect_2").point == pytest.approx(5.0, abs=1e-8)
    assert adjusted.metadata["controls"] == ["x"]
    assert adjusted.fits[0].to_dict()["theta"]["x"] == pytest.approx(2.0)


def test_collinear_controls_are_dropped():
    frame = _confounded_frame()

    result = run(frame, effects=1, controls=("x", "x2"))

    fit = result.fits[0]
    assert len(fit.dropped) == 1
    assert result.get("effect_1").point == pytest.approx(5.0, abs=1e-8)


def test_influence_mean_with_controls():
    frame = _confounded_frame(seed=7)
    frame["Y"] = frame["Y"] + np.random.default_rng(1).normal(size=len(frame))

    result = run(frame, effects=2, placebos=1, controls=("x",))

    table = result.influence
    for label, point in result.points().items():
        if math.isnan(point):
            continue
        assert table.rows[:, table.column(label)].mean() == pytest.approx(point, rel=1e-8, abs=1e-9), label


def test_independent_columns_pivots_out_duplicates():
    x = np.array([[1.0, 2.0, 0.0], [0.0, 0.0, 1.0], [1.0, 2.0, 1.0]])
    gram = x.T @ x

    kept = independent_columns(gram)

    assert kept.size == 2
    assert 2 in kept
    assert independent_columns(np.zeros((2, 2))).size == 0


def test_continuous_baselines():
    records = []
    baselines = [0.5, 1.0, 1.5, 2.0] * 2
    firsts = [5, 5, 5, 5, 2, 3, 3, 4]
    for g, (base, first) in enumerate(zip(baselines, firsts)):
        for t in range(1, 5):
            d = base + 1.0 if t >= first else base
            records.append({"G": g, "T": t, "Y": base + 2.0 * (d - base), "D": d})

    result = run(pd.DataFrame(records), effects=1, continuous=1, normalized=True)

    assert result.metadata["analytic_se_advisory"] is True
    assert result.get("normalized_effect_1").point == pytest.approx(2.0, abs=1e-9)
