"""SQLAlchemy ORM models of the run registry."""
from datetime import datetime, timezone

from sqlalchemy import JSON, Column, DateTime, Float, ForeignKey, Integer, String, Text
from sqlalchemy.orm import relationship

from vpgo.database import Base


def _now() -> datetime:
    return datetime.now(timezone.utc)


class Run(Base):
    """One CLI invocation with its manifest and outcome."""
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True)
    command = Column(String, nullable=False, index=True)
    seed = Column(Integer, nullable=True)
    status = Column(String, nullable=False, default="running")  # running, succeeded, failed
    out_dir = Column(String, nullable=True)
    manifest = Column(JSON, nullable=False)
    created_at = Column(DateTime(timezone=True), nullable=False, default=_now)
    finished_at = Column(DateTime(timezone=True), nullable=True)
    error = Column(Text, nullable=True)

    reports = relationship("MetricRecord", back_populates="run", cascade="all, delete-orphan")


class MetricRecord(Base):
    """Headline scores of one evaluation plus the full report JSON."""
    __tablename__ = "metric_reports"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False, index=True)
    checkpoint = Column(String, nullable=True)
    fvd = Column(Float, nullable=True)
    psnr_best = Column(Float, nullable=False)
    psnr_average = Column(Float, nullable=False)
    ssim_best = Column(Float, nullable=False)
    ssim_average = Column(Float, nullable=False)
    lpips_best = Column(Float, nullable=False)
    lpips_average = Column(Float, nullable=False)
    report = Column(JSON, nullable=False)

    run = relationship("Run", back_populates="reports")
