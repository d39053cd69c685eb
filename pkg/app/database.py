"""
Module: database.py
Description: This module configures the database connection using SQLAlchemy.
It creates the database engine, a session local for interacting with the database,
and a declarative base class for model definitions.
"""

from sqlalchemy import create_engine
from sqlalchemy.orm import declarative_base, sessionmaker

from app.config import DATABASE_URL


def make_engine(url: str = DATABASE_URL):
    """Engine for a database URL; SQLite connections may be shared across threads."""
    connect_args = {"check_same_thread": False} if url.startswith("sqlite") else {}
    return create_engine(url, connect_args=connect_args)


# Create a SQLAlchemy engine instance using the database URL.
engine = make_engine(DATABASE_URL)

# Each instance of SessionLocal is a database session.
SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)

Base = declarative_base()
