"""
Module: models.py
Description: This module defines the SQLAlchemy models for persisted experiment results:
experiment runs, their metric rows and their federation round logs.
"""

from datetime import datetime

from sqlalchemy import JSON, Column, DateTime, Float, ForeignKey, Integer, String
from sqlalchemy.orm import relationship

from app.database import Base


class ExperimentRun(Base):
    """
    Model representing one CLI run.
    """
    __tablename__ = "experiment_runs"

    id = Column(Integer, primary_key=True, index=True)
    command = Column(String(32), nullable=False)
    method = Column(String(16), nullable=True)
    config_hash = Column(String(64), index=True, nullable=False)
    seed = Column(Integer, nullable=False)
    status = Column(String(16), default="completed", nullable=False)
    created_at = Column(DateTime, default=datetime.utcnow)

    # Relationships
    metrics = relationship("MetricRow", back_populates="run", cascade="all, delete-orphan")
    rounds = relationship("FederationRound", back_populates="run", cascade="all, delete-orphan")


class MetricRow(Base):
    """
    Model representing one (method, sweep value, seed) metrics row.
    """
    __tablename__ = "metric_rows"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("experiment_runs.id"), nullable=False)
    method = Column(String(16), nullable=False)
    sweep_value = Column(Float, nullable=False)
    seed = Column(Integer, nullable=False)
    mean_se = Column(Float, nullable=False)
    mean_reward = Column(Float, nullable=False)
    c1_violation_rate = Column(Float, nullable=False)
    c2_violation_rate = Column(Float, nullable=False)
    c8_violation_rate = Column(Float, nullable=False)
    episodes_to_convergence = Column(Integer, nullable=True)

    run = relationship("ExperimentRun", back_populates="metrics")


class FederationRound(Base):
    """
    Model representing one aggregation barrier of a federated run.
    """
    __tablename__ = "federation_rounds"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("experiment_runs.id"), nullable=False)
    round_index = Column(Integer, nullable=False)
    weights = Column(JSON, nullable=False)      # client weights in agent-id order
    pre_hashes = Column(JSON, nullable=False)   # agent id -> uploaded policy hash
    post_hash = Column(String(64), nullable=False)
    distance = Column(Float, nullable=True)
    duration_s = Column(Float, nullable=False)

    run = relationship("ExperimentRun", back_populates="rounds")
