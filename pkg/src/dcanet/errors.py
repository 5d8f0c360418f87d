class ConfigError(ValueError):
    """Invalid configuration (maps to CLI exit code 1)."""


class DataError(ValueError):
    """Bad or inconsistent input data (exit code 2)."""


class NumericalError(RuntimeError):
    """Non-finite loss during training (exit code 3)."""


class CheckpointError(ValueError):
    """Unreadable checkpoint or checkpoint/config mismatch."""
