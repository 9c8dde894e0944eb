"""Monte Carlo acceptance bands at 500 replications.

Minutes of CPU per spec, so opt-in: ``ESDID_COVERAGE=1 pytest tests/test_coverage.py``.
"""

import math
import os
from pathlib import Path

import pytest

from esdid.sim.dgp import load_specs
from esdid.sim.grid import TABLE_COLUMNS, run_spec


pytestmark = pytest.mark.skipif(os.getenv("ESDID_COVERAGE") != "1", reason="set ESDID_COVERAGE=1 to run")

SPEC_DIR = Path(__file__).resolve().parent.parent / "sim_specs"
REPLICATIONS = 500
THREADS = max(1, int(os.getenv("ESDID_THREADS", "1")))
EFFECT_COLUMNS = ["effect_1", "effect_2", "effect_3", "average_total"]


def _spec(grid: str, name: str):
    return next(spec for spec in load_specs(str(SPEC_DIR / f"{grid}.json")) if spec.name == name)


def _report(grid: str, name: str):
    return run_spec(_spec(grid, name), REPLICATIONS, THREADS).cells.set_index("column")


def _finite(cells, columns):
    return cells.loc[[c for c in columns if not math.isnan(cells.loc[c, "coverage"])]]


def test_baseline_coverage_and_placebo_size():
    spec = _spec("panel_a_union", "baseline")
    report = run_spec(spec, REPLICATIONS, THREADS)

    cells = _finite(report.cells.set_index("column"), TABLE_COLUMNS)
    assert cells["coverage"].between(0.93, 0.97).all(), cells["coverage"].to_dict()
    assert 0.03 <= report.placebo_rejection <= 0.08


def test_small_panel_keeps_coverage_but_overrejects_placebos():
    report = run_spec(_spec("panel_a_union", "g20"), REPLICATIONS, THREADS)

    cells = _finite(report.cells.set_index("column"), TABLE_COLUMNS)
    assert (cells["coverage"] >= 0.90).all(), cells["coverage"].to_dict()
    assert report.placebo_rejection > 0.10


def test_equal_effects_test_has_nominal_size():
    report = run_spec(_spec("panel_a_union", "treatment_effect"), REPLICATIONS, THREADS)

    assert 0.03 <= report.equal_rejection <= 0.08


def test_unadjusted_placebo_is_biased_when_controls_matter():
    biased = _report("panel_a_union", "controls_unadjusted").loc["placebo_1"]
    cells = _report("panel_a_union", "controls")
    adjusted = cells.loc["placebo_1"]

    assert abs(biased["mean_estimate"]) > 4 * biased["sd_estimate"] / math.sqrt(biased["replications"])
    assert abs(adjusted["mean_estimate"]) <= 4 * adjusted["sd_estimate"] / math.sqrt(adjusted["replications"])
    assert _finite(cells, TABLE_COLUMNS)["coverage"].between(0.93, 0.97).all()


@pytest.mark.parametrize("name, floor", [("one_per_cohort", 0.945), ("one_per_cohort_effect", 0.96)])
def test_singleton_cohorts_are_conservative(name, floor):
    cells = _finite(_report("panel_b_divorce", name), EFFECT_COLUMNS)

    assert (cells["coverage"] >= floor).all(), cells["coverage"].to_dict()
