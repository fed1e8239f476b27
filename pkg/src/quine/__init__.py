"""Agents as POSIX processes."""

__version__ = "0.1.0"
