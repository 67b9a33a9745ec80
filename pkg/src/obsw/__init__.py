"""Solvers for obliquely reflected FBSDE systems and optimal switching."""

__version__ = "0.1.0"
