"""
Module: runs.py
Description: This module defines read-only API endpoints for persisted experiment runs,
their metric rows and their federation round logs.
"""

import logging
from typing import List

from fastapi import APIRouter, Depends, Query
from sqlalchemy.orm import Session

from app import models, schemas
from app.dependencies import get_db, get_run_or_404

logger = logging.getLogger(__name__)

router = APIRouter()


@router.get("/", response_model=List[schemas.RunResponse])
def list_runs(
    command: str = Query(default=None),
    skip: int = Query(default=0, ge=0),
    limit: int = Query(default=100, ge=1, le=1000),
    db: Session = Depends(get_db),
):
    """
    Retrieve persisted runs, newest first.

    Args:
        command (str, optional): Only runs of this CLI command.
        skip (int): Number of runs to skip.
        limit (int): Maximum number of runs.
        db (Session, optional): Database session dependency.

    Returns:
        List[schemas.RunResponse]: The runs.
    """
    logger.info("GET request on /api/runs/ (command=%s)", command)
    query = db.query(models.ExperimentRun)
    if command:
        query = query.filter(models.ExperimentRun.command == command)
    return query.order_by(models.ExperimentRun.id.desc()).offset(skip).limit(limit).all()


@router.get("/{run_id}", response_model=schemas.RunResponse)
def get_run(run: models.ExperimentRun = Depends(get_run_or_404)):
    """
    Retrieve a specific run by its ID.

    Raises:
        HTTPException: If the run is not found.
    """
    logger.info("GET request on /api/runs/%s", run.id)
    return run


@router.get("/{run_id}/metrics", response_model=List[schemas.MetricRowResponse])
def list_metrics(
    method: str = Query(default=None),
    run: models.ExperimentRun = Depends(get_run_or_404),
    db: Session = Depends(get_db),
):
    """
    Retrieve the metric rows of a run, optionally for one method.
    """
    logger.info("GET request on /api/runs/%s/metrics (method=%s)", run.id, method)
    query = db.query(models.MetricRow).filter(models.MetricRow.run_id == run.id)
    if method:
        query = query.filter(models.MetricRow.method == method)
    return query.order_by(models.MetricRow.sweep_value, models.MetricRow.method, models.MetricRow.seed).all()


@router.get("/{run_id}/rounds", response_model=List[schemas.RoundLogResponse])
def list_rounds(run: models.ExperimentRun = Depends(get_run_or_404), db: Session = Depends(get_db)):
    """
    Retrieve the federation round logs of a run in round order.
    """
    logger.info("GET request on /api/runs/%s/rounds", run.id)
    return (
        db.query(models.FederationRound)
        .filter(models.FederationRound.run_id == run.id)
        .order_by(models.FederationRound.round_index)
        .all()
    )
