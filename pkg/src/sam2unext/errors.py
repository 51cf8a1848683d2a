"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Shapes, channel counts or config values that cannot work together."""


class DegenerateVarianceError(ValueError):
    """Batch statistics requested over a single element."""


class GraphStateError(RuntimeError):
    """Backward requested without a recorded forward pass."""


class CheckpointError(IOError):
    """Unreadable, truncated, corrupted or incompatible checkpoint file."""


class TrainingError(RuntimeError):
    """Non-finite loss or gradient during training."""


class DatasetError(IOError):
    """Dataset directories that yield no usable samples."""
