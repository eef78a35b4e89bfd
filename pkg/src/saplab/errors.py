"""Exception types raised across the lab."""


class SapLabError(Exception):
    """Base class for all lab errors."""


class InputShapeError(SapLabError, ValueError):
    """An input's shape does not match the network or layer it is fed to."""


class ConfigurationError(SapLabError, ValueError):
    """A config value or override is invalid or refers to something missing."""


class TrainingError(SapLabError, RuntimeError):
    """Training diverged."""

    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


class GenerationError(SapLabError, RuntimeError):
    """Synthetic data generation could not satisfy its constraints."""
