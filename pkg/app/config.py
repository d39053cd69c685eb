"""
Module: config.py
Description: This module loads environment variables from a .env file and defines
configuration constants for the application, such as the database URL, the log level,
the default output directory and the default seed. It also provides the loader for
experiment configuration documents.
"""

import logging
import os
from pathlib import Path

from dotenv import load_dotenv
from pydantic import ValidationError

from app.exceptions import ConfigurationError
from app.schemas import ExperimentConfig

# Load environment variables from the .env file.
load_dotenv()

DATABASE_URL = os.getenv("DATABASE_URL", "sqlite:///./leofed.db")
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
OUTPUT_DIR = os.getenv("OUTPUT_DIR", "runs")
DEFAULT_SEED = int(os.getenv("DEFAULT_SEED", "0"))
CORS_ORIGINS = [o for o in os.getenv("CORS_ORIGINS", "http://localhost:5174").split(",") if o]
LOG_FORMAT = "%(levelname)s -> %(message)s"

logger = logging.getLogger(__name__)


def configure_logging(level: str = None) -> None:
    """
    Configure root logging to output to stdout.

    Args:
        level (str, optional): Log level name. Defaults to LOG_LEVEL.
    """
    logging.basicConfig(level=(level or LOG_LEVEL).upper(), format=LOG_FORMAT)


def load_experiment_config(path=None) -> ExperimentConfig:
    """
    Read and validate an experiment configuration document.

    Args:
        path (str | Path, optional): Path to a JSON document. When omitted, the
            desk-scale defaults are returned.

    Returns:
        ExperimentConfig: The validated configuration.

    Raises:
        ConfigurationError: If the file is missing or its content is invalid.
    """
    if path is None:
        return ExperimentConfig()

    config_path = Path(path)
    if not config_path.is_file():
        raise ConfigurationError(f"config file not found: {config_path}")

    logger.info("Loading experiment config from %s", config_path)
    try:
        return ExperimentConfig.model_validate_json(config_path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise ConfigurationError(f"invalid config {config_path}: {e}") from e
