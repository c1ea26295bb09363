"""Exception hierarchy shared across the package."""


class CircuitVitError(Exception):
    """Base class for all package-specific errors."""


class InvalidConfigError(CircuitVitError):
    """A configuration value violates its invariants."""


class ShapeError(CircuitVitError):
    """An array has a shape inconsistent with the configuration."""


class SchemaError(CircuitVitError):
    """A tensor container is missing entries or carries unknown ones."""


class NumericError(CircuitVitError):
    """Non-finite values appeared during a forward pass."""


class DegenerateEmbeddingError(CircuitVitError):
    """Pooling produced a zero-norm vector that cannot be normalized."""


class InputError(CircuitVitError):
    """An input file could not be decoded."""


class ManifestError(CircuitVitError):
    """The dataset tree violates the expected train/test layout."""


class SplitError(CircuitVitError):
    """A validation split cannot be carved from the training data."""


class InvalidSeedError(CircuitVitError):
    """A labeled seed set does not satisfy a classifier's preconditions."""


class EvaluationError(CircuitVitError):
    """A metric or report was requested for missing predictions."""
