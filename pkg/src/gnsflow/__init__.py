"""Stochastic generalized Navier-Stokes flows on the flat 2-torus."""

__version__ = "0.1.0"
