import json
import os
from pathlib import Path

import pandas as pd
import pytest
from sqlalchemy.orm import Session

from esdid.db import create_db_engine, get_estimates, get_recent_runs
from main import main
from panels import long_frame


def _write(frame: pd.DataFrame, tmp_path: Path, name: str = "panel.csv") -> str:
    path = tmp_path / name
    frame.to_csv(path, index=False)
    return str(path)


def _runs() -> list[dict]:
    engine = create_db_engine(os.environ["DATABASE_URL"])
    with Session(engine) as session:
        return get_recent_runs(session)


def test_smoke_run_writes_artifacts(toy, tmp_path, config_path):
    source = _write(toy, tmp_path)

    code = main(["--input", source, "--config", str(config_path), "--effects", "2", "--placebos", "1"])

    assert code == 0
    out = tmp_path / "out"
    results = pd.read_csv(out / "results.csv")
    assert set(results["label"]) == {"effect_1", "effect_2", "placebo_1", "average_total"}
    assert (results["schema_version"] == 1).all()
    assert results.set_index("label").loc["effect_1", "point"] == pytest.approx(5.0)

    event_study = pd.read_csv(out / "event_study.csv")
    assert event_study["horizon"].tolist() == [-1, 0, 1, 2]
    zero = event_study[event_study["horizon"] == 0].iloc[0]
    assert zero["estimate"] == 0.0 and zero["se"] == 0.0
    assert (out / "audit.log").read_text(encoding="utf-8").splitlines()[0] == "policy=liberal"

    runs = _runs()
    assert runs[0]["status"] == "SUCCESS"
    engine = create_db_engine(os.environ["DATABASE_URL"])
    with Session(engine) as session:
        labels = {row["label"] for row in get_estimates(session, runs[0]["run_id"])}
    assert "average_total" in labels


def test_more_placebos_than_effects_is_a_usage_error(toy, tmp_path, config_path, capsys):
    source = _write(toy, tmp_path)

    code = main(["--input", source, "--config", str(config_path), "--effects", "1", "--placebos", "2"])

    assert code == 2
    assert "cannot be larger" in capsys.readouterr().err


def test_missing_column_is_an_input_error(toy, tmp_path, config_path, capsys):
    source = _write(toy.drop(columns=["Y"]), tmp_path)

    code = main(["--input", source, "--config", str(config_path)])

    assert code == 2
    assert "missing columns" in capsys.readouterr().err
    assert _runs()[0]["status"] == "FAILED"


def test_design_restriction_failure_exits_3(tmp_path, config_path, capsys):
    frame = long_frame({"a": [0, 1, 1], "b": [1, 1, 1], "c": [2, 3, 3]})
    source = _write(frame, tmp_path)

    code = main(["--input", source, "--config", str(config_path)])

    assert code == 3
    assert "continuous" in capsys.readouterr().err
    assert _runs()[0]["error_message"].startswith("design restriction 1")


def test_repeated_runs_are_byte_identical(toy, tmp_path, config_path):
    source = _write(toy, tmp_path)
    args = ["--input", source, "--config", str(config_path), "--effects", "2", "--placebos", "1", "--normalized"]

    assert main(args + ["--output-dir", str(tmp_path / "first")]) == 0
    assert main(args + ["--output-dir", str(tmp_path / "second")]) == 0

    for name in ("results.csv", "event_study.csv", "audit.json"):
        assert (tmp_path / "first" / name).read_bytes() == (tmp_path / "second" / name).read_bytes()


def test_json_results_and_optional_artifacts(toy, tmp_path, config_path):
    source = _write(toy, tmp_path)

    code = main(
        [
            "--input", source,
            "--config", str(config_path),
            "--effects", "2",
            "--format", "json",
            "--svg",
            "--design", "1,csv",
            "--save-influence",
            "--effects-equal", "all",
        ]
    )

    assert code == 0
    out = tmp_path / "out"
    payload = json.loads((out / "results.json").read_text(encoding="utf-8"))
    assert payload["schema_version"] == "1"
    assert payload["metadata"]["se_method"] == "analytic"
    assert "effects_equal" in payload["tests"]
    assert (out / "event_study.svg").read_text(encoding="utf-8").startswith("<svg")
    paths = pd.read_csv(out / "design_paths.csv")
    assert paths["share"].sum() == pytest.approx(1.0)
    influence = pd.read_csv(out / "influence.csv")
    assert set(influence["estimate"]) == {"effect_1", "effect_2", "average_total"}


def test_bootstrap_replaces_standard_errors(tmp_path, config_path):
    paths = {f"n{i}": [0, 0, 0, 0] for i in range(6)}
    paths.update({f"e{i}": [0, 1, 1, 1] for i in range(4)})
    paths.update({f"l{i}": [0, 0, 1, 1] for i in range(4)})
    outcome = {
        g: [float(t + 2 * sum(p[:t])) + 0.1 * (i % 7) for t in range(1, 5)] for i, (g, p) in enumerate(paths.items())
    }
    source = _write(long_frame(paths, outcome), tmp_path)

    code = main(["--input", source, "--config", str(config_path), "--bootstrap", "5,11", "--format", "json"])

    assert code == 0
    payload = json.loads((tmp_path / "out" / "results.json").read_text(encoding="utf-8"))
    assert payload["metadata"]["se_method"] == "bootstrap"
    assert payload["metadata"]["bootstrap_seed"] == 11


def test_by_levels_write_stacked_event_study(tmp_path, config_path):
    paths = {
        "n1": [0, 0, 0, 0],
        "s1": [0, 1, 1, 1],
        "s2": [0, 0, 1, 1],
        "n2": [0, 0, 0, 0],
        "s3": [0, 1, 1, 1],
        "s4": [0, 0, 1, 1],
    }
    region = {"n1": "north", "s1": "north", "s2": "north", "n2": "south", "s3": "south", "s4": "south"}
    source = _write(long_frame(paths, region=region), tmp_path)

    code = main(["--input", source, "--config", str(config_path), "--by", "region"])

    assert code == 0
    out = tmp_path / "out"
    stacked = pd.read_csv(out / "event_study.csv")
    assert set(stacked["level"]) == {"north", "south"}
    assert (out / "by_north" / "results.csv").exists()
    assert (out / "by_south" / "results.csv").exists()


def test_bad_bootstrap_argument(toy, tmp_path, config_path, capsys):
    source = _write(toy, tmp_path)

    code = main(["--input", source, "--config", str(config_path), "--bootstrap", "5"])

    assert code == 2
    assert "B,seed" in capsys.readouterr().err
