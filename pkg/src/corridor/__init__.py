"""Coordination engine and simulator for two adjacent signal-free intersections."""

__version__ = "0.1.0"
