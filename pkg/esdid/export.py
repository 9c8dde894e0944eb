from __future__ import annotations

import json
import math
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
import pandas as pd

from esdid.config import AppConfig, EstimationOptions
from esdid.ingest import AuditLog

if TYPE_CHECKING:
    from esdid.heterogeneity import LevelOutcome
    from esdid.pipeline import EstimationResult


EVENT_STUDY_COLUMNS = ["horizon", "estimate", "se", "ci_low", "ci_high", "N", "switchers"]


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"Unsupported value type: {type(value)!r}")


def _clean(value):
    """NaN to null, recursively, so the JSON stays strict."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and math.isnan(value):
        return None
    return value


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(_clean(payload), ensure_ascii=False, indent=2, default=_json_default),
        encoding="utf-8",
    )


def _write_csv(path: Path, frame: pd.DataFrame) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n")


def results_payload(result: EstimationResult, schema_version: str) -> dict:
    payload = {
        "schema_version": schema_version,
        "estimates": [estimate.to_dict() for estimate in result.estimates],
        "tests": {name: test.to_dict() for name, test in result.tests.items()},
        "metadata": result.metadata,
    }
    if result.bootstrap is not None:
        payload["bootstrap"] = {
            "replications": result.bootstrap.replications,
            "failures": result.bootstrap.failures,
        }
    return payload


def event_study_frame(result: EstimationResult, normalized: bool = False) -> pd.DataFrame:
    """Plot data: placebos at negative horizons, one (0, 0) reference row."""
    effect_kind = "normalized_effect" if normalized else "effect"
    placebo_kind = "normalized_placebo" if normalized else "placebo"
    records = [{"horizon": 0, "estimate": 0.0, "se": 0.0, "ci_low": 0.0, "ci_high": 0.0, "N": math.nan, "switchers": math.nan}]
    for estimate in result.estimates:
        if estimate.kind not in (effect_kind, placebo_kind):
            continue
        sign = -1 if estimate.kind == placebo_kind else 1
        records.append(
            {
                "horizon": sign * estimate.horizon,
                "estimate": estimate.point,
                "se": estimate.se,
                "ci_low": estimate.ci_low,
                "ci_high": estimate.ci_high,
                "N": estimate.n_weight,
                "switchers": estimate.switchers,
            }
        )
    frame = pd.DataFrame(records, columns=EVENT_STUDY_COLUMNS)
    return frame.sort_values("horizon", kind="mergesort").reset_index(drop=True)


def event_study_svg(frame: pd.DataFrame, width: int = 480, height: int = 320) -> str:
    """Point estimates with CI whiskers, horizon on x."""
    usable = frame.dropna(subset=["estimate"])
    lows = usable["ci_low"].fillna(usable["estimate"])
    highs = usable["ci_high"].fillna(usable["estimate"])
    x_min, x_max = float(usable["horizon"].min()), float(usable["horizon"].max())
    y_min, y_max = float(min(lows.min(), 0.0)), float(max(highs.max(), 0.0))
    x_span = (x_max - x_min) or 1.0
    y_span = (y_max - y_min) or 1.0
    margin = 30

    def px(x: float) -> float:
        return margin + (x - x_min) / x_span * (width - 2 * margin)

    def py(y: float) -> float:
        return height - margin - (y - y_min) / y_span * (height - 2 * margin)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<line x1="{margin}" y1="{py(0):.2f}" x2="{width - margin}" y2="{py(0):.2f}" stroke="#999"/>',
    ]
    for (_, row), low, high in zip(usable.iterrows(), lows, highs):
        x = px(row["horizon"])
        parts.append(f'<line x1="{x:.2f}" y1="{py(low):.2f}" x2="{x:.2f}" y2="{py(high):.2f}" stroke="#333"/>')
        parts.append(f'<circle cx="{x:.2f}" cy="{py(row["estimate"]):.2f}" r="3" fill="#1f4e79"/>')
        parts.append(
            f'<text x="{x:.2f}" y="{height - 8}" font-size="10" text-anchor="middle">{int(row["horizon"])}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def format_results_table(result: EstimationResult) -> str:
    frame = result.to_frame()[["label", "point", "se", "ci_low", "ci_high", "n_weight", "switchers"]]
    lines = [frame.to_string(index=False)]
    for name, test in result.tests.items():
        lines.append(f"{name}: statistic={test.statistic:.6g} df={test.df} p_value={test.p_value:.6g}")
    return "\n".join(lines)


def write_audit(output_dir: Path, audit: AuditLog) -> list[str]:
    output_dir.mkdir(parents=True, exist_ok=True)
    log_path = output_dir / "audit.log"
    log_path.write_text("\n".join(audit.to_lines()) + "\n", encoding="utf-8")
    json_path = output_dir / "audit.json"
    _write_json(json_path, {"policy": audit.policy, "entries": audit.to_records()})
    return [str(log_path), str(json_path)]


def write_result_files(
    output_dir: Path,
    result: EstimationResult,
    config: AppConfig,
    options: EstimationOptions,
) -> list[str]:
    written = []
    output_dir.mkdir(parents=True, exist_ok=True)
    if config.results_format == "json":
        path = output_dir / "results.json"
        _write_json(path, results_payload(result, config.schema_version))
    else:
        path = output_dir / "results.csv"
        frame = result.to_frame()
        frame.insert(0, "schema_version", config.schema_version)
        _write_csv(path, frame)
    written.append(str(path))

    event_study = event_study_frame(result, normalized=options.normalized)
    path = output_dir / "event_study.csv"
    _write_csv(path, event_study)
    written.append(str(path))
    if config.write_svg:
        path = output_dir / "event_study.svg"
        path.write_text(event_study_svg(event_study), encoding="utf-8")
        written.append(str(path))

    if result.design_paths is not None and options.design is not None and options.design[1] == "csv":
        path = output_dir / "design_paths.csv"
        _write_csv(path, result.design_paths)
        written.append(str(path))
    if config.save_influence:
        path = output_dir / config.save_influence
        _write_csv(path, result.influence.to_frame())
        written.append(str(path))
    if result.fits:
        path = output_dir / "residualization.json"
        _write_json(path, {"schema_version": config.schema_version, "fits": {str(k): f.to_dict() for k, f in result.fits.items()}})
        written.append(str(path))
    if result.het is not None:
        for horizon, table in sorted(result.het.tables.items()):
            path = output_dir / f"het_{horizon}.csv"
            _write_csv(path, table.assign(joint_p_value=result.het.joint_p_values[horizon]))
            written.append(str(path))
    return written


def write_artifacts(
    output_dir: Path,
    result: EstimationResult,
    audit: AuditLog,
    config: AppConfig,
    options: EstimationOptions,
) -> list[str]:
    return write_audit(output_dir, audit) + write_result_files(output_dir, result, config, options)


def write_level_artifacts(
    output_dir: Path,
    levels: list[LevelOutcome],
    audit: AuditLog,
    config: AppConfig,
    options: EstimationOptions,
) -> list[str]:
    """One subdirectory per level plus a stacked event_study.csv with a level column."""
    written = write_audit(output_dir, audit)
    stacked = []
    diagnostics = {}
    for outcome in levels:
        if outcome.result is None:
            diagnostics[str(outcome.level)] = outcome.diagnostic
            continue
        written += write_result_files(output_dir / f"by_{outcome.level}", outcome.result, config, options)
        stacked.append(event_study_frame(outcome.result, options.normalized).assign(level=outcome.level))
    if stacked:
        path = output_dir / "event_study.csv"
        _write_csv(path, pd.concat(stacked, ignore_index=True))
        written.append(str(path))
    if diagnostics:
        path = output_dir / "by_diagnostics.json"
        _write_json(path, {"schema_version": config.schema_version, "empty_levels": diagnostics})
        written.append(str(path))
    return written
