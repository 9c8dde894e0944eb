from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
import os

import yaml
from dotenv import load_dotenv

from esdid.errors import UsageError


SWITCHER_FILTERS = ("both", "in", "out")
DESIGN_TARGETS = ("console", "csv")


@dataclass(frozen=True)
class EstimationOptions:
    outcome: str = "Y"
    group: str = "G"
    period: str = "T"
    treatment: str = "D"
    weight: str | None = None
    effects: int = 1
    placebos: int = 0
    normalized: bool = False
    normalized_weights: bool = False
    effects_equal: tuple[int, ...] | None = None
    design: tuple[float, str] | None = None
    controls: tuple[str, ...] = ()
    trends_nonparam: tuple[str, ...] = ()
    trends_lin: bool = False
    continuous: int | None = None
    cluster: str | None = None
    by: str | None = None
    predict_het: tuple[tuple[str, ...], tuple[int, ...] | None] | None = None
    same_switchers: bool = False
    same_switchers_pl: bool = False
    switchers: str = "both"
    dont_drop_larger_lower: bool = False
    drop_if_d_miss_before_first_switch: bool = False
    more_granular_demeaning: bool = False
    bootstrap: tuple[int, int] | None = None
    tolerance: float = 0.0
    ci_level: float = 0.95

    def validate(self) -> "EstimationOptions":
        if self.effects < 1:
            raise UsageError(f"effects must be at least 1, got {self.effects}")
        if self.placebos < 0:
            raise UsageError(f"placebos must be nonnegative, got {self.placebos}")
        if self.placebos > self.effects:
            raise UsageError(
                "placebos: the number of placebos requested cannot be larger than "
                f"the number of effects requested ({self.placebos} > {self.effects})"
            )
        if self.same_switchers_pl and not self.same_switchers:
            raise UsageError("same_switchers_pl can only be specified together with same_switchers")
        if self.predict_het is not None and (self.normalized or self.controls):
            raise UsageError("predict_het cannot be specified together with the normalized or controls options")
        if self.switchers not in SWITCHER_FILTERS:
            raise UsageError(f"switchers must be one of {SWITCHER_FILTERS}, got {self.switchers!r}")
        if self.design is not None:
            coverage, target = self.design
            if not 0 < coverage <= 1:
                raise UsageError(f"design coverage must lie in (0, 1], got {coverage}")
            if target not in DESIGN_TARGETS:
                raise UsageError(f"design target must be one of {DESIGN_TARGETS}, got {target!r}")
        if self.continuous is not None and self.continuous < 1:
            raise UsageError(f"continuous polynomial order must be at least 1, got {self.continuous}")
        if self.bootstrap is not None and self.bootstrap[0] < 2:
            raise UsageError(f"bootstrap needs at least 2 replications, got {self.bootstrap[0]}")
        if self.tolerance < 0:
            raise UsageError(f"tolerance must be nonnegative, got {self.tolerance}")
        if not 0 < self.ci_level < 1:
            raise UsageError(f"ci_level must lie in (0, 1), got {self.ci_level}")
        if self.effects_equal is not None:
            bad = [h for h in self.effects_equal if not 1 <= h <= self.effects]
            if bad:
                raise UsageError(f"effects_equal horizons {bad} fall outside 1..{self.effects}")
        return self

    @property
    def missing_policy(self) -> str:
        return "conservative" if self.drop_if_d_miss_before_first_switch else "liberal"


@dataclass(frozen=True)
class AppConfig:
    app_name: str
    output_dir: str
    results_format: str
    write_svg: bool
    save_influence: str | None
    schema_version: str
    ledger_enabled: bool
    sim_reps: int
    sim_seed: int
    sim_report_path: str
    database_url: str
    log_level: str
    threads: int
    estimation: EstimationOptions = field(default_factory=EstimationOptions)


def _estimation_defaults(section: dict) -> EstimationOptions:
    return EstimationOptions(
        outcome=str(section.get("outcome", "Y")),
        group=str(section.get("group", "G")),
        period=str(section.get("period", "T")),
        treatment=str(section.get("treatment", "D")),
        weight=section.get("weight"),
        effects=int(section.get("effects", 1)),
        placebos=int(section.get("placebos", 0)),
        tolerance=float(section.get("tolerance", 0.0)),
        ci_level=float(section.get("ci_level", 0.95)),
    )


def load_config(config_path: str = "config.yaml") -> AppConfig:
    load_dotenv()
    path = Path(config_path)
    raw = yaml.safe_load(path.read_text(encoding="utf-8")) if path.exists() else {}
    raw = raw or {}

    app = raw.get("app", {})
    estimation = raw.get("estimation", {})
    output = raw.get("output", {})
    ledger = raw.get("ledger", {})
    simulation = raw.get("simulation", {})

    return AppConfig(
        app_name=app.get("name", "esdid"),
        output_dir=output.get("dir", "output"),
        results_format=output.get("format", "csv"),
        write_svg=bool(output.get("svg", False)),
        save_influence=output.get("save_influence"),
        schema_version=str(output.get("schema_version", "1")),
        ledger_enabled=bool(ledger.get("enabled", True)),
        sim_reps=int(simulation.get("reps", 500)),
        sim_seed=int(simulation.get("seed", 20240101)),
        sim_report_path=simulation.get("report_path", "output/simulation_report.csv"),
        database_url=os.getenv("DATABASE_URL", "sqlite:///./data/esdid.db"),
        log_level=os.getenv("LOG_LEVEL", "INFO"),
        threads=max(1, int(os.getenv("ESDID_THREADS", "1"))),
        estimation=_estimation_defaults(estimation),
    )
