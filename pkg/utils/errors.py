"""Exception hierarchy shared by every stage. Each class maps to a CLI exit code."""


class LRQError(Exception):
    """Base class for all expected failures."""

    exit_code = 1


class ConfigError(LRQError):
    """Invalid configuration or arguments."""

    exit_code = 2


class ShapeError(ConfigError):
    """Tensor dimensions do not line up."""


class RangeError(ConfigError):
    """Quantization clip range is empty or inverted."""


class GraphError(ConfigError):
    """Backward called on something that is not a scalar on the tape."""


class FrozenStoreError(ConfigError):
    """Attempt to mutate BN statistics after the pretraining snapshot."""


class EmptyStatsError(ConfigError):
    """Snapshot requested before any running statistics were collected."""


class DataError(LRQError):
    """Malformed, truncated or missing input data."""

    exit_code = 3


class MissingCheckpointError(DataError):
    """A checkpoint needed by a downstream stage does not exist."""

    def __init__(self, path, producer):
        self.path = path
        self.producer = producer
        super().__init__(f"Checkpoint not found: {path}. Run `{producer}` first to produce it.")


class NumericalError(LRQError):
    """NaN or Inf showed up in a forward pass or a loss."""

    exit_code = 4
