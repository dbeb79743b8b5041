"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation."""


class ContractError(RuntimeError):
    """A precondition of an operation was violated at call time."""


class ConfigError(ValueError):
    """A configuration value is invalid or contradictory."""


class SamplingError(ValueError):
    """An episode cannot be drawn from the given split."""


class IngestionError(OSError):
    """A file referenced by a dataset manifest could not be read."""


class FormatError(ValueError):
    """A dataset file does not follow its declared layout."""


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""
