import math

import numpy as np
import pytest

from esdid.errors import EstimationError
from brute_force import brute_force
from panels import long_frame, random_frame, randomized_frame, run


def test_toy_effects_and_average_total(toy):
    result = run(toy, effects=3)

    points = result.points()
    assert points["effect_1"] == pytest.approx(5.0)
    assert points["effect_2"] == pytest.approx(5.0)
    assert points["effect_3"] == pytest.approx(5.0)
    assert points["average_total"] == pytest.approx(5.0)
    assert result.get("effect_1").switchers == 2
    assert result.get("effect_3").switchers == 1
    assert result.metadata["L_u"] == 3
    assert result.metadata["effects_estimated"] == 3


def test_effects_are_truncated_to_reach(toy):
    result = run(toy, effects=5)

    assert result.metadata["effects_requested"] == 5
    assert result.metadata["effects_estimated"] == 3
    assert "effect_4" not in result.points()


@pytest.mark.parametrize("seed", range(200))
def test_matches_brute_force(seed):
    frame = randomized_frame(seed)
    expected = brute_force(frame, effects=4, placebos=3, weight="w")

    try:
        result = run(frame, weight="w", effects=4, placebos=3, normalized=True)
    except EstimationError:
        assert all(math.isnan(v) for k, v in expected.items() if k.startswith("effect_"))
        return

    points = result.points()
    assert {k for k in points if k.startswith("effect_")} == {k for k in expected if k.startswith("effect_")}
    for label, value in expected.items():
        np.testing.assert_allclose(points.get(label, math.nan), value, rtol=1e-10, atol=1e-10, err_msg=label)


def test_constant_outcome_gives_zero(toy):
    result = run(toy.assign(Y=7.0), effects=2, placebos=1)

    for label, value in result.points().items():
        if not math.isnan(value):
            assert value == pytest.approx(0.0, abs=1e-12), label


def test_invariant_to_group_and_period_shifts():
    frame = random_frame(11, missing=0.0)
    codes = frame["G"].str[1:].astype(int)
    shifted = frame.assign(Y=frame["Y"] + 3.0 * codes - 0.5 * (frame["T"] - 2000) ** 2 + 100.0)

    base = run(frame, effects=3, placebos=2).points()
    moved = run(shifted, effects=3, placebos=2).points()

    assert base.keys() == moved.keys()
    for label in base:
        np.testing.assert_allclose(moved[label], base[label], rtol=1e-9, atol=1e-9, err_msg=label)


def test_placebos_vanish_under_common_trends():
    paths = {"a": [0] * 6, "b": [0] * 6, "c": [0, 0, 0, 1, 1, 1], "d": [0, 0, 0, 0, 1, 1]}
    outcome = {g: [t * t + 2.0 * i for t in range(1, 7)] for i, g in enumerate(paths)}

    result = run(long_frame(paths, outcome), effects=2, placebos=2)

    assert result.get("placebo_1").point == pytest.approx(0.0, abs=1e-12)
    assert result.get("placebo_2").point == pytest.approx(0.0, abs=1e-12)
    assert result.get("effect_1").point == pytest.approx(0.0, abs=1e-12)


def test_placebo_picks_up_differential_pre_trend():
    paths = {"a": [0] * 5, "b": [0] * 5, "c": [0, 0, 0, 1, 1]}
    outcome = {"a": [0.0] * 5, "b": [0.0] * 5, "c": [1.0, 2.0, 3.0, 4.0, 5.0]}

    result = run(long_frame(paths, outcome), effects=1, placebos=1)

    assert result.get("placebo_1").point == pytest.approx(-1.0)
    assert result.get("effect_1").point == pytest.approx(1.0)


def test_binary_normalized_effects_divide_by_horizon(toy):
    result = run(toy, effects=2, normalized=True)

    assert result.get("normalized_effect_1").point == pytest.approx(5.0)
    assert result.get("normalized_effect_2").point == pytest.approx(2.5)
    assert result.metadata["normalization_doses"] == pytest.approx(
        {"normalized_effect_1": 1.0, "normalized_effect_2": 2.0}
    )
    assert result.get("normalized_effect_2").variance == pytest.approx(result.get("effect_2").variance / 4.0)


def _two_sided_frame():
    paths = {"a": [1, 1, 1, 1], "b": [1, 1, 1, 1], "c": [1, 1, 2, 2], "d": [1, 0, 0, 0]}
    outcome = {"a": [0.0] * 4, "b": [0.0] * 4, "c": [0.0, 0.0, 5.0, 5.0], "d": [0.0, -3.0, -3.0, -3.0]}
    return long_frame(paths, outcome)


@pytest.mark.parametrize(
    "switchers, expected",
    [("both", 4.0), ("in", 5.0), ("out", 3.0)],
)
def test_switcher_filters(switchers, expected):
    result = run(_two_sided_frame(), effects=1, switchers=switchers)

    assert result.get("effect_1").point == pytest.approx(expected)
    assert result.get("average_total").point == pytest.approx(expected)


def test_one_sided_components_are_reported():
    result = run(_two_sided_frame(), effects=1)

    sides = result.metadata["one_sided"]["effect_1"]
    assert sides["did_plus"] == pytest.approx(5.0)
    assert sides["did_minus"] == pytest.approx(3.0)
    assert result.metadata["w_plus"] == pytest.approx(0.5)
    assert result.metadata["switchers_in"] == 1
    assert result.metadata["switchers_out"] == 1


def test_group_specific_linear_trends():
    slopes = {"n1": 0.3, "n2": -0.4, "n3": 1.1, "s3": 0.7, "s4": -0.2}
    paths = {
        "n1": [0] * 6,
        "n2": [0] * 6,
        "n3": [0] * 6,
        "s3": [0, 0, 1, 1, 1, 1],
        "s4": [0, 0, 0, 1, 1, 1],
    }
    outcome = {
        g: [2.0 + slopes[g] * t + 5.0 * d for t, d in zip(range(1, 7), paths[g])]
        for g in paths
    }

    result = run(long_frame(paths, outcome), effects=2, placebos=2, trends_lin=True)

    points = result.points()
    assert points["effect_1"] == pytest.approx(5.0, abs=1e-9)
    assert points["effect_2"] == pytest.approx(5.0, abs=1e-9)
    assert points["placebo_1"] == pytest.approx(0.0, abs=1e-9)
    assert "placebo_2" not in points
    assert "average_total" not in points


def test_linear_trends_drop_placebos_without_switchers():
    slopes = {"n1": 0.3, "n2": -0.4, "n3": 1.1, "s3": 0.7, "s4": -0.2}
    paths = {
        "n1": [0] * 6,
        "n2": [0] * 6,
        "n3": [0] * 6,
        "s3": [0, 0, 1, 1, 1, 1],
        "s4": [0, 0, 0, 1, 1, 1],
    }
    outcome = {
        g: [2.0 + slopes[g] * t + 5.0 * d for t, d in zip(range(1, 7), paths[g])]
        for g in paths
    }

    # placebo_2 would need a first difference at period 1
    result = run(long_frame(paths, outcome), effects=3, placebos=2, trends_lin=True)

    points = result.points()
    for horizon in (1, 2, 3):
        assert points[f"effect_{horizon}"] == pytest.approx(5.0, abs=1e-9)
    assert points["placebo_1"] == pytest.approx(0.0, abs=1e-9)
    assert result.get("placebo_1").switchers == 1
    assert "placebo_2" not in points
    assert result.metadata["placebos_estimated"] == 1


def test_same_switchers_changes_nothing_on_balanced_toy(toy):
    plain = run(toy, effects=2).points()
    same = run(toy, effects=2, same_switchers=True).points()

    assert same == pytest.approx(plain)


def test_no_switchers_is_an_error():
    frame = long_frame({"a": [0, 0, 0], "b": [1, 1, 1]})

    with pytest.raises(EstimationError, match="no switcher"):
        run(frame)


def test_group_effects_table(toy):
    result = run(toy, effects=2)

    table = result.group_effects
    assert sorted(table["group"].unique()) == ["C", "D"]
    np.testing.assert_allclose(table["effect"], 5.0)
    assert set(table["horizon"]) == {1, 2}
