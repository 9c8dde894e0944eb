import pytest

from esdid.config import EstimationOptions, load_config
from esdid.errors import UsageError


def test_load_config_reads_yaml_and_env(config_path, monkeypatch):
    monkeypatch.setenv("ESDID_THREADS", "0")

    config = load_config(str(config_path))

    assert config.app_name == "esdid-test"
    assert config.results_format == "csv"
    assert config.sim_reps == 2
    assert config.sim_seed == 7
    assert config.log_level == "WARNING"
    assert config.threads == 1
    assert config.database_url.startswith("sqlite:///")
    assert config.estimation == EstimationOptions()


def test_missing_config_file_falls_back_to_defaults(tmp_path):
    config = load_config(str(tmp_path / "absent.yaml"))

    assert config.output_dir == "output"
    assert config.schema_version == "1"
    assert config.ledger_enabled is True
    assert config.estimation.effects == 1


@pytest.mark.parametrize(
    ("values", "message"),
    [
        ({"effects": 0}, "at least 1"),
        ({"effects": 1, "placebos": 2}, "cannot be larger"),
        ({"same_switchers_pl": True}, "same_switchers"),
        ({"switchers": "sideways"}, "switchers must be"),
        ({"design": (1.5, "console")}, "coverage"),
        ({"bootstrap": (1, 3)}, "at least 2"),
        ({"effects": 2, "effects_equal": (1, 3)}, "outside"),
        ({"normalized": True, "predict_het": (("x",), None)}, "predict_het"),
    ],
)
def test_invalid_options_are_usage_errors(values, message):
    with pytest.raises(UsageError, match=message):
        EstimationOptions(**values).validate()


def test_missing_policy():
    assert EstimationOptions().missing_policy == "liberal"
    assert EstimationOptions(drop_if_d_miss_before_first_switch=True).missing_policy == "conservative"
