"""Exception types shared by all estimation and IO modules."""

from __future__ import annotations


class CdexggmError(Exception):
    """Base class for all library-specific failures."""


class NotPositiveDefiniteError(CdexggmError):
    """A matrix that must be positive definite is not.

    ``index`` identifies the offending observation (or observation/vertex
    pair) when known.
    """

    def __init__(self, message: str, index=None):
        super().__init__(message)
        self.index = index


class ConvergenceError(CdexggmError):
    """An iterative solver exhausted its budget.

    Carries the best iterate and whatever trace the solver accumulated so
    callers can diagnose or restart.
    """

    def __init__(self, message: str, trace=None, best=None, residual_norm=None):
        super().__init__(message)
        self.trace = trace
        self.best = best
        self.residual_norm = residual_norm


class SingularMatrixError(CdexggmError):
    """A matrix that must be invertible is numerically singular."""


class NumericalError(CdexggmError):
    """A quantity left its valid numerical range (degenerate denominator,
    non-positive variance, ...)."""


class BootstrapError(CdexggmError):
    """Too many bootstrap replicates failed to fit."""

    def __init__(self, message: str, n_failed: int = 0, n_total: int = 0):
        super().__init__(message)
        self.n_failed = n_failed
        self.n_total = n_total


class SelectionError(CdexggmError):
    """Every candidate fit on the penalty grid failed."""

    def __init__(self, message: str, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


class StudyError(CdexggmError):
    """Too many simulation replicates failed."""


class DataFormatError(CdexggmError):
    """Input file could not be parsed; message includes file and line."""
