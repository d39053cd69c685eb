"""
Module: dependencies.py
Description: This module defines common dependencies for FastAPI routes: a database session
and the lookup of a persisted run that several routes share.
"""

from fastapi import Depends, HTTPException, status
from sqlalchemy.orm import Session

from app import database, models


def get_db():
    """
    Dependency that provides a database session.

    Yields:
        Session: A SQLAlchemy session instance.
    """
    db = database.SessionLocal()
    try:
        yield db
    finally:
        db.close()


def get_run_or_404(run_id: int, db: Session = Depends(get_db)) -> models.ExperimentRun:
    """
    Retrieve a run by its ID.

    Raises:
        HTTPException: If the run is not found.
    """
    run = db.query(models.ExperimentRun).filter(models.ExperimentRun.id == run_id).first()
    if not run:
        raise HTTPException(status_code=status.HTTP_404_NOT_FOUND, detail="Run not found")
    return run
