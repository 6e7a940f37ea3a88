"""Exception hierarchy shared across the pipeline."""


class MCMMFError(Exception):
    """Base class for domain errors raised by this package."""


class LayoutError(MCMMFError):
    """A core patch does not fit inside the frame."""


class CorrelationError(MCMMFError, ValueError):
    """A correlation is undefined (constant inputs)."""


class CalibrationError(MCMMFError):
    """Calibration inputs are inconsistent."""


class FormatError(MCMMFError):
    """A binary or text file does not follow its declared format."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(MCMMFError, ValueError):
    """A run configuration failed validation."""

    def __init__(self, key: str, constraint: str):
        super().__init__(f"{key}: {constraint}")
        self.key = key
        self.constraint = constraint
