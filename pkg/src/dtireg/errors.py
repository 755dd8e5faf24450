"""Exception types shared across the package."""


class DtiregError(Exception):
    """Base class for all package errors."""


class ValidationError(DtiregError):
    """Inputs violate a documented precondition or invariant."""


class FormatError(DtiregError):
    """On-disk data does not match the expected file format."""


class DegenerateSchemeError(DtiregError):
    """Gradient scheme cannot support a tensor fit (rank < 7)."""


class DegenerateMatrixError(DtiregError):
    """Matrix is singular where an invertible one is required."""


class RankDeficiencyError(DtiregError):
    """Point sets are too degenerate for an affine least-squares fit."""


class UndefinedMetricError(DtiregError):
    """Metric is undefined for the given inputs (e.g. both images constant)."""


class TrainingError(DtiregError):
    """Optimization diverged; carries the failing step index."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
