"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor extents do not agree with what an operation requires."""


class ParameterError(ValueError):
    """A scalar argument is outside its allowed range."""


class ConfigurationError(ValueError):
    """An encoder or block configuration is inconsistent."""


class ModeError(RuntimeError):
    """An operation was invoked in the wrong router mode."""


class PartitionError(ValueError):
    """Trainable/frozen partition requested for a mode that has none."""


class TrainingError(RuntimeError):
    """Fine-tuning diverged (non-finite loss)."""
