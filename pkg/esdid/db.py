from __future__ import annotations

from datetime import datetime, timezone
import math
from pathlib import Path
from uuid import uuid4

from sqlalchemy import (
    JSON,
    Column,
    DateTime,
    Float,
    Integer,
    MetaData,
    String,
    Table,
    create_engine,
    select,
    update,
)
from sqlalchemy.engine import Engine
from sqlalchemy.orm import Session


metadata = MetaData()

estimation_runs = Table(
    "estimation_runs",
    metadata,
    Column("run_id", String(64), primary_key=True),
    Column("kind", String(16), nullable=False),
    Column("started_at", DateTime(timezone=True), nullable=False),
    Column("finished_at", DateTime(timezone=True), nullable=True),
    Column("status", String(16), nullable=False),
    Column("input_path", String(500), nullable=True),
    Column("options", JSON, nullable=True),
    Column("details", JSON, nullable=True),
    Column("error_message", String(500), nullable=True),
)

estimate_rows = Table(
    "estimate_rows",
    metadata,
    Column("run_id", String(64), primary_key=True),
    Column("label", String(64), primary_key=True),
    Column("kind", String(32), nullable=False),
    Column("horizon", Integer, nullable=False),
    Column("point", Float, nullable=True),
    Column("se", Float, nullable=True),
    Column("ci_low", Float, nullable=True),
    Column("ci_high", Float, nullable=True),
    Column("n_weight", Float, nullable=False),
    Column("switchers", Integer, nullable=False),
)

simulation_cells = Table(
    "simulation_cells",
    metadata,
    Column("run_id", String(64), primary_key=True),
    Column("spec", String(64), primary_key=True),
    Column("label", String(64), primary_key=True),
    Column("coverage", Float, nullable=True),
    Column("mc_se", Float, nullable=True),
    Column("mean_estimate", Float, nullable=True),
    Column("truth", Float, nullable=True),
    Column("replications", Integer, nullable=False),
    Column("failures", Integer, nullable=False),
)


def utcnow() -> datetime:
    return datetime.now(timezone.utc)


def create_db_engine(database_url: str) -> Engine:
    if database_url.startswith("sqlite:///") and not database_url.endswith(":memory:"):
        Path(database_url.removeprefix("sqlite:///")).parent.mkdir(parents=True, exist_ok=True)
    return create_engine(database_url, future=True)


def init_db(engine: Engine) -> None:
    metadata.create_all(engine)


def new_run_id() -> str:
    return uuid4().hex


def _finite(value: float) -> float | None:
    return None if value is None or math.isnan(value) else float(value)


def record_run_started(
    session: Session,
    run_id: str,
    kind: str,
    input_path: str | None = None,
    options: dict | None = None,
) -> None:
    session.execute(
        estimation_runs.insert().values(
            run_id=run_id,
            kind=kind,
            started_at=utcnow(),
            status="RUNNING",
            input_path=input_path,
            options=options,
        )
    )


def record_run_finished(
    session: Session,
    run_id: str,
    status: str,
    details: dict | None = None,
    error_message: str | None = None,
) -> None:
    session.execute(
        update(estimation_runs)
        .where(estimation_runs.c.run_id == run_id)
        .values(
            finished_at=utcnow(),
            status=status,
            details=details,
            error_message=error_message,
        )
    )


def record_estimates(session: Session, run_id: str, estimates) -> int:
    rows = [
        {
            "run_id": run_id,
            "label": e.label,
            "kind": e.kind,
            "horizon": e.horizon,
            "point": _finite(e.point),
            "se": _finite(e.se),
            "ci_low": _finite(e.ci_low),
            "ci_high": _finite(e.ci_high),
            "n_weight": float(e.n_weight),
            "switchers": int(e.switchers),
        }
        for e in estimates
    ]
    if rows:
        session.execute(estimate_rows.insert(), rows)
    return len(rows)


def record_simulation_cells(session: Session, run_id: str, cells: list[dict]) -> int:
    rows = [
        {
            "run_id": run_id,
            "spec": cell["spec"],
            "label": cell["label"],
            "coverage": _finite(cell["coverage"]),
            "mc_se": _finite(cell["mc_se"]),
            "mean_estimate": _finite(cell["mean_estimate"]),
            "truth": _finite(cell["truth"]),
            "replications": int(cell["replications"]),
            "failures": int(cell["failures"]),
        }
        for cell in cells
    ]
    if rows:
        session.execute(simulation_cells.insert(), rows)
    return len(rows)


def get_recent_runs(session: Session, limit: int = 20) -> list[dict]:
    stmt = (
        select(
            estimation_runs.c.run_id,
            estimation_runs.c.kind,
            estimation_runs.c.started_at,
            estimation_runs.c.finished_at,
            estimation_runs.c.status,
            estimation_runs.c.error_message,
        )
        .order_by(estimation_runs.c.started_at.desc())
        .limit(limit)
    )
    return [dict(row) for row in session.execute(stmt).mappings().all()]


def get_estimates(session: Session, run_id: str) -> list[dict]:
    stmt = select(estimate_rows).where(estimate_rows.c.run_id == run_id).order_by(estimate_rows.c.label)
    return [dict(row) for row in session.execute(stmt).mappings().all()]
