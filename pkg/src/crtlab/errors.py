"""Exception hierarchy shared across the package."""


class CrtError(Exception):
    """Base class for all errors raised by crtlab."""


class ShapeError(CrtError, ValueError):
    pass


class NonFiniteError(CrtError, FloatingPointError):
    """An operation produced NaN or Inf."""


class GradientError(CrtError, RuntimeError):
    pass


class CheckpointError(CrtError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointDimensionError(CheckpointError):
    pass


class DatasetError(CrtError, ValueError):
    pass


class IdxMagicError(DatasetError):
    pass


class IdxLengthMismatchError(DatasetError):
    pass


class ConfigError(CrtError):
    """Configuration problems; ``violations`` lists every problem found."""

    def __init__(self, violations, path=None):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        self.path = path
        prefix = f"{path}: " if path else ""
        super().__init__(prefix + "; ".join(self.violations))
