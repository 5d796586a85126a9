"""Constraint-weighted federated aggregation: simulator, analysis and CLI."""

from .errors import CalibrationError, ConfigError, DegenerateRoundError, DivergedClientError

__all__ = ["CalibrationError", "ConfigError", "DegenerateRoundError", "DivergedClientError"]
