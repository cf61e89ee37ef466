"""SQLite run registry for persistence."""

from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Generator, Optional

from sqlalchemy import (
    JSON,
    DateTime,
    Enum,
    Float,
    ForeignKey,
    Integer,
    String,
    create_engine,
)
from sqlalchemy.orm import (
    Mapped,
    Session,
    declarative_base,
    mapped_column,
    relationship,
    sessionmaker,
)
from sqlalchemy.orm.query import Query

from domain.models import CalibrationResult, ModelFamily, RunManifest, Variable

# Database setup
DATABASE_NAME: str = "runs.db"

Base: Any = declarative_base()


def _enum_values(enum: Any) -> list[str]:
    return [e.value for e in enum]


# SQLAlchemy Models
class RunModel(Base):
    """SQLAlchemy model for one command run."""

    __tablename__: str = "runs"

    id: Mapped[int] = mapped_column(Integer, primary_key=True, index=True)
    command: Mapped[str] = mapped_column(String(length=32), nullable=False)
    config_path: Mapped[Optional[str]] = mapped_column(String, nullable=True)
    seed: Mapped[Optional[int]] = mapped_column(Integer, nullable=True)
    threads: Mapped[int] = mapped_column(Integer, default=1)
    input_hash: Mapped[str] = mapped_column(String(length=64), default="")
    inputs: Mapped[list[str]] = mapped_column(JSON, default=list)
    outputs: Mapped[list[str]] = mapped_column(JSON, default=list)
    parameters: Mapped[dict[str, Any]] = mapped_column(JSON, default=dict)
    started_at: Mapped[datetime] = mapped_column(
        DateTime, default=lambda: datetime.now(tz=timezone.utc)
    )
    finished_at: Mapped[Optional[datetime]] = mapped_column(DateTime, nullable=True)

    # Relationships
    coefficients: Mapped[list["CoefficientModel"]] = relationship(
        argument="CoefficientModel", back_populates="run", cascade="all, delete-orphan"
    )


class CoefficientModel(Base):
    """SQLAlchemy model for calibrated coefficients of one horizon."""

    __tablename__: str = "coefficients"

    id: Mapped[int] = mapped_column(Integer, primary_key=True, index=True)
    run_id: Mapped[int] = mapped_column(
        Integer, ForeignKey(column="runs.id"), nullable=False
    )
    family: Mapped[ModelFamily] = mapped_column(
        Enum(ModelFamily, values_callable=_enum_values, native_enum=False), nullable=False
    )
    variable: Mapped[Variable] = mapped_column(
        Enum(Variable, values_callable=_enum_values, native_enum=False), nullable=False
    )
    horizon_h: Mapped[int] = mapped_column(Integer, nullable=False)
    a0: Mapped[float] = mapped_column(Float, nullable=False)
    a1: Mapped[float] = mapped_column(Float, nullable=False)
    c: Mapped[float] = mapped_column(Float, nullable=False)
    d: Mapped[float] = mapped_column(Float, nullable=False)
    b: Mapped[float] = mapped_column(Float, nullable=False)
    # Rate on the lead-time interval ending at this horizon; none for the shortest.
    rho: Mapped[Optional[float]] = mapped_column(Float, nullable=True)

    # Relationships
    run: Mapped["RunModel"] = relationship(argument="RunModel", back_populates="coefficients")


def init_db(db_path: Path | str) -> sessionmaker[Session]:
    """Create tables at db_path and return a session factory."""
    Path(db_path).parent.mkdir(parents=True, exist_ok=True)
    engine = create_engine(url=f"sqlite:///{db_path}")
    Base.metadata.create_all(bind=engine)
    return sessionmaker(autocommit=False, autoflush=False, bind=engine)


@contextmanager
def get_db(session_factory: sessionmaker[Session]) -> Generator[Session, None, None]:
    """Get database session context manager."""
    db: Session = session_factory()
    try:
        yield db
    finally:
        db.close()


# CRUD Operations for Run
def create_run(db: Session, run_data: dict[str, Any]) -> RunModel:
    """Create a new run."""
    run = RunModel(**run_data)
    db.add(instance=run)
    db.commit()
    db.refresh(instance=run)
    return run


def get_run(db: Session, run_id: int) -> Optional[RunModel]:
    """Get a run by ID."""
    return db.query(RunModel).filter(RunModel.id == run_id).first()


def get_all_runs(
    db: Session,
    skip: int = 0,
    limit: int = 100,
    command: Optional[str] = None,
) -> list[RunModel]:
    """Get all runs with optional filtering by command."""
    query: Query[RunModel] = db.query(RunModel)
    if command:
        query = query.filter(RunModel.command == command)
    return query.order_by(RunModel.id).offset(offset=skip).limit(limit=limit).all()


def delete_run(db: Session, run_id: int) -> bool:
    """Delete a run and its coefficients."""
    run: RunModel | None = get_run(db=db, run_id=run_id)
    if not run:
        return False

    db.delete(instance=run)
    db.commit()
    return True


# CRUD Operations for Coefficients
def create_coefficients(
    db: Session, run_id: int, rows: list[dict[str, Any]]
) -> list[CoefficientModel]:
    """Store one coefficient row per horizon for a run."""
    models: list[CoefficientModel] = [CoefficientModel(run_id=run_id, **row) for row in rows]
    db.add_all(instances=models)
    db.commit()
    for model in models:
        db.refresh(instance=model)
    return models


def get_coefficients_for_run(db: Session, run_id: int) -> list[CoefficientModel]:
    """Get the coefficient rows of a run, shortest horizon first."""
    return (
        db.query(CoefficientModel)
        .filter(CoefficientModel.run_id == run_id)
        .order_by(CoefficientModel.horizon_h)
        .all()
    )


# Helper Functions
def coefficient_rows(result: CalibrationResult) -> list[dict[str, Any]]:
    """Flatten a calibration into registry rows."""
    rows: list[dict[str, Any]] = []
    for k, coeffs in enumerate(result.per_horizon):
        rows.append(
            {
                "family": result.family,
                "variable": result.variable,
                "horizon_h": coeffs.horizon_h,
                "a0": coeffs.a0,
                "a1": coeffs.a1,
                "c": coeffs.c,
                "d": coeffs.d,
                "b": result.shared_b,
                "rho": result.rho.values[k - 1] if result.rho is not None and k > 0 else None,
            }
        )
    return rows


def record_run(
    db_path: Path | str,
    manifest: RunManifest,
    calibration: Optional[CalibrationResult] = None,
) -> int:
    """
    Register a finished run and, for calibrations, its coefficients.

    Returns:
        The new run ID
    """
    session_factory: sessionmaker[Session] = init_db(db_path=db_path)
    with get_db(session_factory) as db:
        run_data: dict[str, Any] = manifest.model_dump()
        run_data["parameters"] = manifest.model_dump(mode="json")["parameters"]
        run: RunModel = create_run(db=db, run_data=run_data)
        if calibration is not None:
            create_coefficients(db=db, run_id=run.id, rows=coefficient_rows(calibration))
        return run.id
