"""Cascading-blackout Monte Carlo simulation and risk reweighting under changed CoFPFs."""

__version__ = "0.1.0"
