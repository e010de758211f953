"""Multistage stochastic linear programs with joint chance constraints under linear decision rules."""

__version__ = "0.1.0"
