"""Exception types shared across the package."""


class SSDGError(Exception):
    """Base class for all package errors."""


class ConfigError(SSDGError, ValueError):
    """An invalid configuration value.  ``field`` names the offending key."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class ShapeError(SSDGError, ValueError):
    """Input array has the wrong rank, channel count or size."""


class DataError(SSDGError):
    """Problems with on-disk datasets (layout, decoding, class sets)."""


class NumericalError(SSDGError, FloatingPointError):
    """A loss or gradient became non-finite during training."""
