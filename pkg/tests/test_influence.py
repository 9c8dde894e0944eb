import logging
import math

import numpy as np
import pytest

from esdid.errors import EstimationError
from esdid.influence import cluster_totals, log_linearization_gaps, normalized_variance, variance
from panels import random_frame, randomized_frame, run


@pytest.mark.parametrize("seed", range(50))
def test_influence_mean_reproduces_every_point(seed):
    try:
        result = run(randomized_frame(seed), weight="w", effects=4, placebos=3, normalized=True)
    except EstimationError:
        pytest.skip("no estimable horizon")

    table = result.influence
    for label, point in result.points().items():
        if math.isnan(point):
            continue
        mean = table.rows[:, table.column(label)].mean()
        assert mean == pytest.approx(point, rel=1e-10, abs=1e-10), label
    assert log_linearization_gaps(result.points(), table) == []

    for label in result.points():
        if label.startswith("placebo_"):
            effect = result.get(label.replace("placebo_", "effect_"))
            assert result.get(label).switchers <= effect.switchers, label

    doses = result.metadata["normalization_doses"]
    for label, dose in doses.items():
        normalized = result.get(label)
        plain = result.get(label.replace("normalized_", ""))
        if math.isnan(normalized.variance):
            continue
        assert normalized.se * dose == pytest.approx(plain.se, rel=1e-12, abs=1e-15), label


def test_linearization_gaps_are_reported(caplog):
    result = run(random_frame(3), weight="w", effects=2)
    points = {label: point + 1e-6 for label, point in result.points().items()}

    with caplog.at_level(logging.WARNING, logger="esdid.influence"):
        gaps = log_linearization_gaps(points, result.influence)

    assert set(gaps) == {label for label, point in points.items() if not math.isnan(point)}
    assert "linearization gap" in caplog.text


def test_group_level_clusters_reproduce_unclustered_variance():
    frame = random_frame(8)
    frame["c"] = frame["G"]

    plain = run(frame, effects=2, placebos=1)
    clustered = run(frame, effects=2, placebos=1, cluster="c")

    for estimate in plain.estimates:
        other = clustered.get(estimate.label)
        np.testing.assert_array_equal(other.variance, estimate.variance, err_msg=estimate.label)


def test_single_supergroup_reproduces_baseline():
    frame = random_frame(9).assign(region=1)

    plain = run(frame, effects=2)
    pooled = run(frame, effects=2, trends_nonparam=("region",))

    for estimate in plain.estimates:
        other = pooled.get(estimate.label)
        np.testing.assert_array_equal([other.point, other.variance], [estimate.point, estimate.variance])


def test_variances_are_finite_and_intervals_symmetric():
    result = run(random_frame(10), weight="w", effects=2, placebos=1)

    for estimate in result.estimates:
        if math.isnan(estimate.point):
            continue
        assert estimate.variance >= 0
        assert estimate.ci_high - estimate.point == pytest.approx(estimate.point - estimate.ci_low)


def test_cluster_totals_and_variance():
    rows = np.array([1.0, 2.0, -1.0, 4.0])
    units = np.array([0, 0, 1, 1])

    np.testing.assert_allclose(cluster_totals(rows, units), [3.0, 3.0])
    assert variance(rows, units, 4) == pytest.approx(18.0 / 16.0)
    assert variance(rows, np.arange(4), 4) == pytest.approx(22.0 / 16.0)


def test_normalized_variance_scales_by_squared_dose():
    assert normalized_variance(2.0, 2.0) == pytest.approx(0.5)
    assert math.isnan(normalized_variance(2.0, 0.0))
