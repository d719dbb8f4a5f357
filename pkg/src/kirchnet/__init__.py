"""Kirchhoff-style RC state-space dynamics, neural blocks and a Poisson operator benchmark."""

__version__ = "0.1.0"
