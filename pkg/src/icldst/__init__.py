"""Retrieval-augmented in-context-learning harness for dialogue state tracking."""

__version__ = "0.1.0"
