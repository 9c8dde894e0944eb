from __future__ import annotations

from pathlib import Path

import pytest
import yaml

from panels import toy_frame


@pytest.fixture
def toy():
    return toy_frame()


@pytest.fixture
def config_path(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> Path:
    """Config writing artifacts under tmp_path, with the run ledger in a temporary SQLite file."""
    monkeypatch.setenv("DATABASE_URL", f"sqlite:///{tmp_path / 'ledger' / 'esdid.db'}")
    monkeypatch.setenv("LOG_LEVEL", "WARNING")
    monkeypatch.delenv("ESDID_THREADS", raising=False)
    path = tmp_path / "config.yaml"
    path.write_text(
        yaml.safe_dump(
            {
                "app": {"name": "esdid-test"},
                "output": {"dir": str(tmp_path / "out"), "format": "csv", "schema_version": "1"},
                "ledger": {"enabled": True},
                "simulation": {"reps": 2, "seed": 7, "report_path": str(tmp_path / "sim.csv")},
            }
        ),
        encoding="utf-8",
    )
    return path
