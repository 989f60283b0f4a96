"""Exception types shared across modules."""

from __future__ import annotations


class CascadeRiskError(Exception):
    """Base class for all package errors."""


class DataError(CascadeRiskError):
    """Malformed or inconsistent input data (case files, specs, archives)."""


class NumericalError(CascadeRiskError):
    """A numerical routine failed (singular system, infeasible LP, non-finite value)."""
