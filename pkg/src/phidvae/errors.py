"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class UnsupportedOperationError(TypeError):
    """An operation without a registered derivative was applied to a traced value."""


class NumericError(ArithmeticError):
    """A factorization or solve failed numerically."""

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class DivergenceError(NumericError):
    """Newton iteration failed to converge."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class MeshError(ValueError):
    """Invalid mesh or assembly request."""


class ConfigError(ValueError):
    """Invalid configuration; ``keys`` lists the offending entries."""

    def __init__(self, message, keys=()):
        super().__init__(message)
        self.keys = list(keys)


class CheckpointError(RuntimeError):
    """Checkpoint does not match the requested architecture or format."""


class TrainingError(RuntimeError):
    """Training aborted; ``snapshot`` holds diagnostic state."""

    def __init__(self, message, epoch=None, snapshot=None):
        super().__init__(message)
        self.epoch = epoch
        self.snapshot = snapshot or {}
