"""Probability enclosures and PID synthesis for stochastic parametric hybrid systems."""
from __future__ import annotations

__version__ = "0.1.0"
