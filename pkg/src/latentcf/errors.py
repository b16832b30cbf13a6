"""Exception types shared across the package."""

from __future__ import annotations


class LatentCFError(Exception):
    """Base class for all package errors."""


class ShapeError(LatentCFError):
    """Operands have incompatible shapes."""


class ParameterError(LatentCFError):
    """An operation parameter is out of its valid range."""


class ContractError(LatentCFError):
    """A caller violated an operation precondition."""


class SchemaError(LatentCFError):
    """An observation or tensor does not match the declared feature schema."""


class SplitError(LatentCFError):
    """Too few episodes to produce the requested train/test split."""


class DegenerateStatisticsError(LatentCFError):
    """A variable has zero variance, so it cannot be normalized."""


class DegenerateLabelsError(LatentCFError):
    """A labeled set contains only one class."""


class MalformedFileError(LatentCFError):
    """A dataset or checkpoint file is truncated, corrupt, or of an unknown version."""


class TrainingFailureError(LatentCFError):
    """Training did not reach its configured performance floor.

    Carries the learning curve so the caller can diagnose the run.
    """

    def __init__(self, message: str, history: list[float] | None = None):
        super().__init__(message)
        self.history = history or []


class TraversalError(LatentCFError):
    """A latent traversal produced a non-finite gradient or latent.

    Carries the latent path up to the failure for diagnostics.
    """

    def __init__(self, message: str, path: list | None = None):
        super().__init__(message)
        self.path = path or []


class ConfigError(LatentCFError):
    """An experiment or service configuration references missing or invalid inputs."""
