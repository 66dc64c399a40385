"""Exception types shared across the pipeline."""


class SaviorError(Exception):
    """Base class for all pipeline errors."""


class ShapeError(SaviorError, ValueError):
    pass


class ContractError(SaviorError, ValueError):
    """A function was called outside its documented preconditions."""


class ConfigError(SaviorError, ValueError):
    pass


class DegenerateBatchError(ContractError):
    pass


class UndefinedMetricError(SaviorError, ValueError):
    """Metric has no value for the given input (e.g. AUC on one class)."""


class DivergenceError(SaviorError, RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class DependencyError(SaviorError, RuntimeError):
    """A pipeline stage is missing the artifacts of an upstream stage."""


class ArtifactConflictError(SaviorError, RuntimeError):
    """Existing artifacts were produced under a different configuration."""
