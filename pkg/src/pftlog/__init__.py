"""Replicated append-only log with crash-level commit and Byzantine-level audit."""

__version__ = "0.1.0"
