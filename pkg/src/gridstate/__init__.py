"""Robust steady-state estimation for power transmission networks."""

__version__ = "0.1.0"
