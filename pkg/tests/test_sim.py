import json
import math
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from esdid.sim.base_panels import DIVORCE_ADOPTIONS, divorce_panel, newspaper_panel, union_panel
from esdid.sim.dgp import DgpSpec, cluster_layout, generate, intra_cluster_correlation, load_specs, truths
from esdid.sim.grid import (
    Replication,
    coverage_labels,
    coverage_table,
    implied_inflation,
    mc_standard_error,
    run_grid,
    run_spec,
    summarize,
)


SPEC_DIR = Path(__file__).resolve().parent.parent / "sim_specs"


def test_base_panel_shapes():
    union = union_panel()
    assert union.treatment.shape == (545, 8)
    assert union.period_labels[0] == 1980

    divorce = divorce_panel()
    assert divorce.treatment.shape == (40, 31)
    assert int((~divorce.switchers).sum()) == 10
    assert int(divorce.switchers.sum()) == sum(DIVORCE_ADOPTIONS.values())

    newspapers = newspaper_panel()
    assert newspapers.treatment.shape == (1195, 8)
    observed = newspapers.treatment[~np.isnan(newspapers.treatment)]
    assert observed.min() >= 0 and observed.max() <= 4


def test_generate_is_reproducible_per_replication():
    spec = DgpSpec(name="d", base_panel="divorce", seed=3)

    first = generate(spec, 0)
    again = generate(spec, 0)
    other = generate(spec, 1)

    pd.testing.assert_frame_equal(first, again)
    assert not np.allclose(first["Y"], other["Y"])


def test_effect_shifts_only_treated_cells():
    plain = generate(DgpSpec(name="a", base_panel="divorce", seed=9), 2)
    treated = generate(DgpSpec(name="b", base_panel="divorce", seed=9, effect=0.25), 2)

    np.testing.assert_allclose(treated["Y"] - plain["Y"], 0.25 * plain["D"])


def test_subsample_splits_switchers_and_stayers():
    spec = DgpSpec(name="g50", n_groups=50, seed=1)

    frame = generate(spec, 0)

    by_group = frame.groupby("G")["D"].agg(lambda d: d.nunique() > 1)
    assert by_group.size == 50
    assert int(by_group.sum()) == 25


def test_cluster_layout_groups_lowest_outcomes():
    base = union_panel()

    keep, cluster = cluster_layout(base)

    assert keep.size == 500
    assert np.bincount(cluster).tolist() == [10] * 50
    assert base.y1[keep].max() <= np.sort(base.y1)[499]


def test_truths():
    spec = DgpSpec(name="t", effect=2.0)

    values = truths(spec, ["effect_1", "normalized_effect_2", "placebo_1", "normalized_placebo_3", "average_total"])

    assert values == {
        "effect_1": 2.0,
        "normalized_effect_2": 1.0,
        "placebo_1": 0.0,
        "normalized_placebo_3": 0.0,
        "average_total": 2.0,
    }


def test_coverage_labels_switch_to_normalized():
    labels = coverage_labels(DgpSpec(name="n", options={"normalized": True}))

    assert labels["effect_2"] == "normalized_effect_2"
    assert labels["placebo_1"] == "normalized_placebo_1"
    assert labels["average_total"] == "average_total"


def test_monte_carlo_helpers():
    assert mc_standard_error(0.95, 500) == pytest.approx(math.sqrt(0.95 * 0.05 / 500))
    assert implied_inflation(0.95) == pytest.approx(1.0)
    assert implied_inflation(0.97) == pytest.approx(2.170090 / 1.959964, rel=1e-5)
    assert math.isnan(implied_inflation(1.0))


def test_intra_cluster_correlation():
    cluster = np.repeat(np.arange(5), 4)
    assert intra_cluster_correlation(cluster.astype(float), cluster) == pytest.approx(1.0)

    values = np.tile([1.0, -1.0, 2.0, -2.0], 5)
    assert intra_cluster_correlation(values, cluster) < 0


def test_summarize_counts_coverage():
    spec = DgpSpec(name="s", effect=1.0)
    results = [
        Replication({"effect_1": (1.1, 0.5, 1.5)}, placebo_p_value=0.01),
        Replication({"effect_1": (2.5, 2.0, 3.0)}, placebo_p_value=0.5),
        None,
    ]

    report = summarize(spec, results)

    row = report.cells.set_index("column").loc["effect_1"]
    assert row["coverage"] == pytest.approx(0.5)
    assert row["mean_estimate"] == pytest.approx(1.8)
    assert row["sd_estimate"] == pytest.approx(0.98995, rel=1e-4)
    assert row["replications"] == 2
    assert report.failures == 1
    assert report.placebo_rejection == pytest.approx(0.5)
    assert math.isnan(report.cells.set_index("column").loc["placebo_3", "coverage"])


def test_coverage_table_reports_both_rejection_rates():
    spec = DgpSpec(name="s", effect=1.0)
    results = [
        Replication({"effect_1": (1.1, 0.5, 1.5)}, placebo_p_value=0.01, equal_p_value=0.2),
        Replication({"effect_1": (2.5, 2.0, 3.0)}, placebo_p_value=0.5, equal_p_value=0.01),
        Replication({"effect_1": (0.9, 0.0, 2.0)}, placebo_p_value=0.5, equal_p_value=0.03),
        Replication({"effect_1": (1.0, 0.1, 1.9)}, placebo_p_value=0.5),
    ]

    table = coverage_table([summarize(spec, results)])

    assert list(table.columns)[-2:] == ["f_test", "equal_test"]
    row = table.iloc[0]
    assert row["effect_1"] == pytest.approx(0.75)
    assert row["f_test"] == pytest.approx(0.25)
    assert row["equal_test"] == pytest.approx(2 / 3)


def test_small_grid_runs_and_is_deterministic():
    spec = DgpSpec(name="divorce", base_panel="divorce", seed=5, options={"effects": 3, "placebos": 3})

    first = run_spec(spec, replications=3)
    second = run_spec(spec, replications=3)

    pd.testing.assert_frame_equal(first.cells, second.cells)
    assert first.replications + first.failures == 3
    assert set(first.cells["column"]) >= {"effect_1", "average_total", "placebo_3"}


def test_linear_trends_leave_last_placebo_and_total_empty():
    spec = DgpSpec(
        name="lt",
        trend="linear_quintile",
        n_groups=60,
        seed=2,
        options={"effects": 3, "placebos": 3, "trends_lin": True},
    )

    report = run_spec(spec, replications=2)

    cells = report.cells.set_index("column")
    assert math.isnan(cells.loc["average_total", "coverage"])
    assert math.isnan(cells.loc["placebo_3", "coverage"])


def test_run_grid_rejects_single_replication():
    with pytest.raises(ValueError):
        run_grid([DgpSpec(name="x")], replications=1)


def test_load_specs_merges_defaults(tmp_path):
    path = tmp_path / "grid.json"
    path.write_text(
        json.dumps({"defaults": {"base_panel": "divorce", "options": {"effects": 2}}, "specs": [{"name": "a"}, {"name": "b", "effect": 1.0}]}),
        encoding="utf-8",
    )

    specs = load_specs(str(path))

    assert [s.name for s in specs] == ["a", "b"]
    assert specs[1].effect == 1.0
    assert specs[0].estimation_options().effects == 2


def test_shipped_grids_parse():
    for name in ("panel_a_union", "panel_b_divorce", "panel_c_newspaper"):
        for spec in load_specs(str(SPEC_DIR / f"{name}.json")):
            spec.estimation_options()


def test_simulate_cli_records_cells(tmp_path, config_path):
    from sqlalchemy import select
    from sqlalchemy.orm import Session

    from esdid.db import create_db_engine, get_recent_runs, simulation_cells
    from simulate import main

    grid = tmp_path / "grid.json"
    grid.write_text(
        json.dumps({"defaults": {"base_panel": "divorce", "options": {"effects": 1}}, "specs": [{"name": "tiny", "effect": 0.5}]}),
        encoding="utf-8",
    )

    code = main(["--spec", str(grid), "--config", str(config_path)])

    assert code == 0
    report = pd.read_csv(tmp_path / "sim.csv")
    assert set(report["spec"]) == {"tiny"}
    engine = create_db_engine(f"sqlite:///{tmp_path / 'ledger' / 'esdid.db'}")
    with Session(engine) as session:
        runs = get_recent_runs(session)
        cells = session.execute(select(simulation_cells)).mappings().all()
    assert runs[0]["kind"] == "simulate"
    assert runs[0]["status"] == "SUCCESS"
    assert len(cells) == len(report)


def test_simulate_cli_rejects_single_replication(tmp_path, config_path, capsys):
    from simulate import main

    code = main(["--spec", str(SPEC_DIR / "panel_b_divorce.json"), "--config", str(config_path), "--reps", "1"])

    assert code == 2
    assert "reps" in capsys.readouterr().err
