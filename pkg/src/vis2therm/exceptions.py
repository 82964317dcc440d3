"""Exception hierarchy shared across the package."""


class Vis2ThermError(Exception):
    """Base class for all package errors."""


class ManifestError(Vis2ThermError, ValueError):
    """A manifest file is missing or cannot be loaded."""


class ManifestParseError(ManifestError):
    """A manifest row is malformed."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(Vis2ThermError, ValueError):
    """Inputs violate a documented invariant."""


class ShapeError(Vis2ThermError, ValueError):
    """Array or tensor shapes are incompatible."""


class NumericError(Vis2ThermError, FloatingPointError):
    """A loss or activation became non-finite during training."""


class CheckpointError(Vis2ThermError, ValueError):
    """A checkpoint file is unreadable or has the wrong format."""


class EvaluationError(Vis2ThermError, ValueError):
    """Detection evaluation is undefined for the given inputs."""


class ConfigError(Vis2ThermError, ValueError):
    """An experiment configuration is invalid."""
