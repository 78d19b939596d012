"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid static configuration (resolution table, unknown keys, ...)."""


class ShapeError(ValueError):
    """Tensor shape or size contract violated."""


class DomainError(ValueError):
    """Scalar argument outside its documented domain (e.g. degree not in [0,1])."""


class InputError(ValueError):
    """Non-finite or otherwise invalid input data."""


class IncompatibilityError(ValueError):
    """Parameter blocks cannot be transplanted between networks."""


class CheckpointError(RuntimeError):
    """Checkpoint archive is missing, truncated or inconsistent."""


class TrainingDivergedError(RuntimeError):
    """Optimization diverged; carries a diagnostic message."""


class TrainingAbortedError(RuntimeError):
    """NaN encountered during training; ``last_good`` holds a checkpoint path."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good
