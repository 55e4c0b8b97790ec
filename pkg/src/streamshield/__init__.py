"""Anomaly and fraud-category detection on streaming-license telemetry."""

__version__ = "0.1.0"
