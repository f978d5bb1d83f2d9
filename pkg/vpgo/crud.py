"""CRUD operations for the run registry."""
import logging
from datetime import datetime, timezone
from typing import List, Optional

from sqlalchemy.orm import Session

from vpgo import records
from vpgo.schemas import MetricReport, RunManifest

log = logging.getLogger(__name__)


def create_run(db: Session, manifest: RunManifest, out_dir: Optional[str] = None) -> records.Run:
    """
    Record a run before its work starts.

    Args:
        db: Database session
        manifest: Run manifest
        out_dir: Output directory of the run

    Returns:
        Created Run with status "running"
    """
    db_run = records.Run(
        command=manifest.command,
        seed=manifest.seed,
        status="running",
        out_dir=out_dir,
        manifest=manifest.model_dump(mode="json"),
    )
    db.add(db_run)
    db.commit()
    db.refresh(db_run)
    log.debug("registered run %d (%s)", db_run.id, manifest.command)
    return db_run


def finish_run(db: Session, run_id: int, error: Optional[str] = None) -> Optional[records.Run]:
    """Mark a run succeeded, or failed with `error`."""
    db_run = get_run(db, run_id)
    if db_run is None:
        return None
    db_run.status = "failed" if error else "succeeded"
    db_run.error = error
    db_run.finished_at = datetime.now(timezone.utc)
    db.commit()
    db.refresh(db_run)
    return db_run


def add_metric_report(
    db: Session,
    run_id: int,
    report: MetricReport,
    checkpoint: Optional[str] = None,
) -> records.MetricRecord:
    """Store the headline scores and full JSON of an evaluation."""
    m = report.metrics
    db_record = records.MetricRecord(
        run_id=run_id,
        checkpoint=checkpoint,
        fvd=report.fvd.mean if report.fvd is not None else None,
        psnr_best=m["psnr"].best.mean,
        psnr_average=m["psnr"].average.mean,
        ssim_best=m["ssim"].best.mean,
        ssim_average=m["ssim"].average.mean,
        lpips_best=m["lpips"].best.mean,
        lpips_average=m["lpips"].average.mean,
        report=report.model_dump(mode="json"),
    )
    db.add(db_record)
    db.commit()
    db.refresh(db_record)
    return db_record


def get_run(db: Session, run_id: int) -> Optional[records.Run]:
    return db.query(records.Run).filter(records.Run.id == run_id).first()


def list_runs(db: Session, skip: int = 0, limit: int = 100, command: Optional[str] = None) -> List[records.Run]:
    """List runs, newest first, optionally filtered by command."""
    query = db.query(records.Run)
    if command:
        query = query.filter(records.Run.command == command)
    return query.order_by(records.Run.id.desc()).offset(skip).limit(limit).all()


def get_run_reports(db: Session, run_id: int) -> List[records.MetricRecord]:
    return (
        db.query(records.MetricRecord)
        .filter(records.MetricRecord.run_id == run_id)
        .order_by(records.MetricRecord.id)
        .all()
    )
