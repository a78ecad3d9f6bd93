"""
Exception hierarchy shared by every stage of the estimation stack.
"""


class SparError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(SparError):
    pass


class NonFiniteEntry(SparError):
    pass


class EmptyMatrix(SparError):
    pass


class SingularDesign(SparError):
    pass


class InvalidConfig(SparError, ValueError):
    pass


class NotPositiveDefinite(SparError):
    pass


class DegenerateSignal(SparError):
    pass


class ConvergenceFailure(SparError):
    pass


class SingularCovariance(SparError):
    pass


class UnsupportedDimension(SparError):
    pass


class Infeasible(SparError):
    pass


class RankDeficientSubmatrix(SparError):
    pass


class IoError(SparError):
    pass


class PipelineStageError(SparError):
    """Wraps an error raised inside a named pipeline stage."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")


def require(condition: bool, message: str) -> None:
    """Raise InvalidConfig with the given message unless condition holds."""
    if not condition:
        raise InvalidConfig(message)
