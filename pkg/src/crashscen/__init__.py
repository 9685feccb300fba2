"""Scenario generation from crash reports with context-aware decoding, plus evaluation metrics."""

__version__ = "0.1.0"
