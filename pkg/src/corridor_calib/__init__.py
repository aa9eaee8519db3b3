"""Freeway-corridor microsimulation and bi-level demand calibration."""

__version__ = "0.1.0"
