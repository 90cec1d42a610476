class ConfigError(ValueError):
    """Raised for invalid experiment, benchmark or trainer configuration."""


class DatasetUnavailable(RuntimeError):
    """Raised when a dataset is neither present under data_root nor downloadable."""


class NonFiniteLossError(RuntimeError):
    """Raised when a loss term becomes NaN or infinite during training."""

    def __init__(self, message, context=None):
        super().__init__(message)
        self.context = dict(context or {})
