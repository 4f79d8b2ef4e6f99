"""Offline-online PG-LOD for periodic coefficients with rare random defects."""

__version__ = "0.1.0"
