"""Exception hierarchy shared by every module."""

from typing import Optional


class BroadcastError(Exception):
    """Base class for all errors raised by losbroadcast."""


class InvalidConfigError(BroadcastError, ValueError):
    """A configuration value is out of range or unknown."""


class InvalidArgumentError(BroadcastError, ValueError):
    """A function argument violates its documented domain."""


class DegeneratePlacementError(BroadcastError, ValueError):
    """Two nodes coincide, so the channel matrix is undefined."""

    def __init__(self, message: str, pair: Optional[tuple] = None):
        super().__init__(message)
        self.pair = pair


class InvalidPartitionError(BroadcastError, ValueError):
    """A grid or block partition does not fit the network."""


class WindowViolationError(BroadcastError, ValueError):
    """An off-diagonal block lies outside the distance window of its bound."""


class LayoutInfeasibleError(BroadcastError, ValueError):
    """The cluster-pair geometry cannot be built for this network size."""

    def __init__(self, message: str, minimum_feasible_n: Optional[int] = None):
        if minimum_feasible_n is not None:
            message = f"{message} (minimum feasible n: {minimum_feasible_n})"
        super().__init__(message)
        self.minimum_feasible_n = minimum_feasible_n


class ConvergenceError(BroadcastError, RuntimeError):
    """Power iteration hit its iteration cap before converging."""

    def __init__(self, message: str, best_estimate: float, iterations: int, residual: float):
        super().__init__(message)
        self.best_estimate = best_estimate
        self.iterations = iterations
        self.residual = residual


class DivergenceError(BroadcastError, RuntimeError):
    """The back-and-forth recursion produced a non-finite signal."""


class ReportWriteError(BroadcastError, OSError):
    """A report file could not be written."""
