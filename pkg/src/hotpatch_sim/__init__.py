"""Deterministic simulator of a task-aware hotpatching runtime for real-time firmware."""

__version__ = "0.1.0"
