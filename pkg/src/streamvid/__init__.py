"""Frozen image encoder + recurrent temporal modules for streaming video."""

__version__ = "0.1.0"
