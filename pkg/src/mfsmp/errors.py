"""Exception types raised across the package."""

from __future__ import annotations


class MfsmpError(Exception):
    """Base class for all package errors."""


class NegativeRate(MfsmpError):
    pass


class RowSumViolation(MfsmpError):
    pass


class MajorantViolation(MfsmpError):
    """A realized total exit rate exceeded the thinning majorant."""


class UnsupportedTransition(MfsmpError):
    """Positive controlled rate on an edge the reference generator forbids."""


class ZeroRateAtJump(MfsmpError):
    pass


class InsufficientPaths(MfsmpError):
    pass


class InadmissiblePerturbation(MfsmpError):
    pass


class NoConvergence(MfsmpError):
    """Iteration budget exhausted; ``best`` carries the best iterate found."""

    def __init__(self, message: str, best=None, iterations: int = 0, residual: float = float("nan")):
        super().__init__(message)
        self.best = best
        self.iterations = iterations
        self.residual = residual


class NonFiniteField(MfsmpError):
    def __init__(self, message: str, time: float):
        super().__init__(message)
        self.time = time


class NonFiniteState(MfsmpError):
    def __init__(self, message: str, last_valid_time: float):
        super().__init__(message)
        self.last_valid_time = last_valid_time


class EmptyControlSet(MfsmpError):
    pass


class ZeroQuadraticCoefficient(MfsmpError):
    pass


class ConfigError(MfsmpError):
    pass
