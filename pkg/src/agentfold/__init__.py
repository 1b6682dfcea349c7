"""Proactive context folding for long-horizon agents."""

__version__ = "0.1.0"
