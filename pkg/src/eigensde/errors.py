"""
eigensde Error Hierarchy
========================

Every failure raised by the package derives from ``EigenSDEError`` and
carries the process exit code the command-line surface reports for it.
"""


class EigenSDEError(Exception):
    """Base class for all eigensde errors."""

    exit_code = 1


class ConfigError(EigenSDEError, ValueError):
    """Invalid configuration value, unknown preset or dimension mismatch."""

    exit_code = 2


class DataError(EigenSDEError, ValueError):
    """Malformed dataset, checkpoint or trajectory content."""

    exit_code = 3


class ScheduleError(DataError):
    """Control segments overlap or are not sorted."""


class ScheduleGapError(ScheduleError):
    """A strict-mode query hit a span with no control segment."""


class TimeReversalError(DataError):
    """Propagation was requested backwards in time."""


class NumericError(EigenSDEError, ArithmeticError):
    """A numerical operation could not produce a trustworthy value."""

    exit_code = 4


class SingularBasisError(NumericError):
    """The eigenbasis determinant fell below the configured floor."""


class DefectiveMatrixError(NumericError):
    """The dynamics matrix is not (numerically) diagonalizable."""


class SingularInnovationError(NumericError):
    """The innovation covariance of a filtering step is ill-conditioned."""


class NonPSDCovarianceError(NumericError):
    """A covariance matrix that must be positive definite is not."""


class NonFiniteLossError(NumericError):
    """A trajectory produced a non-finite prediction or loss."""

    def __init__(self, message, traj_id=None, interval=None):
        super().__init__(message)
        self.traj_id = traj_id
        self.interval = interval


class TrainingAbortedError(NumericError):
    """Too many consecutive batches had to be skipped."""
