"""Read-only routes over the run registry."""
from typing import List, Optional

from fastapi import APIRouter, Depends, HTTPException, status
from sqlalchemy.orm import Session

from vpgo import crud, schemas
from vpgo.database import get_db

router = APIRouter(prefix="/runs", tags=["runs"])


@router.get("/", response_model=List[schemas.RunRead])
def browse_runs(
    skip: int = 0,
    limit: int = 100,
    command: Optional[str] = None,
    db: Session = Depends(get_db),
):
    """
    Browse recorded runs, newest first.

    - **skip**: Number of records to skip (default: 0)
    - **limit**: Maximum records to return (default: 100)
    - **command**: Only runs of this subcommand
    """
    return crud.list_runs(db, skip=skip, limit=limit, command=command)


@router.get("/{run_id}", response_model=schemas.RunRead)
def read_run(run_id: int, db: Session = Depends(get_db)):
    """
    Read one run.

    Raises:
        404: If the run does not exist
    """
    run = crud.get_run(db, run_id)
    if run is None:
        raise HTTPException(status_code=status.HTTP_404_NOT_FOUND, detail="Run not found")
    return run


@router.get("/{run_id}/manifest")
def read_manifest(run_id: int, db: Session = Depends(get_db)):
    run = crud.get_run(db, run_id)
    if run is None:
        raise HTTPException(status_code=status.HTTP_404_NOT_FOUND, detail="Run not found")
    return run.manifest


@router.get("/{run_id}/reports", response_model=List[schemas.MetricRecordRead])
def read_run_reports(run_id: int, db: Session = Depends(get_db)):
    """Headline scores of every evaluation recorded under the run."""
    if crud.get_run(db, run_id) is None:
        raise HTTPException(status_code=status.HTTP_404_NOT_FOUND, detail="Run not found")
    return crud.get_run_reports(db, run_id)
