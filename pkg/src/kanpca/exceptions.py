"""Exception hierarchy shared across the package."""


class KanPcaError(Exception):
    """Base class for all errors raised by kanpca."""


class DataError(KanPcaError, ValueError):
    """Malformed or unusable input data (parsing, ordering, degenerate columns)."""


class LeakageError(KanPcaError):
    """A fitting step tried to read validation or test rows."""


class StaleCacheError(KanPcaError, ValueError):
    """A backward pass was given a cache that does not belong to the layer state."""


class NumericalError(KanPcaError, ArithmeticError):
    """Non-finite values or a failed numerical procedure."""


class ConvergenceError(NumericalError):
    """An iterative solver hit its iteration cap."""


class DivergenceError(NumericalError):
    """Training produced a non-finite loss."""

    def __init__(self, message, stage=None, epoch=None):
        super().__init__(message)
        self.stage = stage
        self.epoch = epoch


class RankDeficientFitWarning(RuntimeWarning):
    """Least-squares refit was near-singular and fell back to a ridge solve."""
