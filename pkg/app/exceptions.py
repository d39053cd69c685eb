"""
Module: exceptions.py
Description: This module defines the exception hierarchy shared by the simulation engine,
the command-line interface and the API routes.
"""


class LeoFedError(Exception):
    """Base class for every error raised by the laboratory."""


class ConfigurationError(LeoFedError, ValueError):
    """Raised when a configuration, an argument or a plan entry is invalid."""


class InfeasibleScenarioError(LeoFedError):
    """Raised when a scenario cannot be served at all (no RUEs, no visible satellite)."""


class MatchingError(LeoFedError):
    """Raised when a matching breaks a capacity or swap refinement exceeds its iteration cap."""


class NumericalError(LeoFedError):
    """Raised when a loss, gradient or action contains non-finite values."""


class FileFormatError(LeoFedError):
    """
    Raised when a parameter or demonstration file cannot be read or written.

    Attributes:
        path (str): The offending file path.
    """

    def __init__(self, path, message: str):
        super().__init__(f"{path}: {message}")
        self.path = str(path)


class FederationError(LeoFedError):
    """Raised when a federation round is aborted because an agent failed."""
