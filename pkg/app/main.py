"""
Module: main.py
Description: This module initializes and configures the FastAPI application served by the
terrestrial gateway. It sets up logging, CORS middleware, and includes the route modules for
persisted runs and parameter aggregation.
"""

import logging

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from app.config import CORS_ORIGINS, configure_logging
from app.routes import federation, runs

configure_logging()

logger = logging.getLogger(__name__)
logger.info("Starting FastAPI application")

# Initialize the FastAPI application.
app = FastAPI(title="LeoFed API")

app.add_middleware(
    CORSMiddleware,
    allow_origins=CORS_ORIGINS,
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

app.include_router(runs.router, prefix="/api/runs", tags=["runs"])
app.include_router(federation.router, prefix="/api/federation", tags=["federation"])


@app.get("/")
def read_root():
    """
    Root endpoint that returns a welcome message.
    """
    return {"message": "Welcome to LeoFed API"}
