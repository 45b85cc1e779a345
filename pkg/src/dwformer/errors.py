"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid shapes, extents, or configuration values."""


class InputError(ValueError):
    """Malformed runtime inputs (tokens out of range, schema mismatch, ...)."""


class NumericsError(RuntimeError):
    """A forward computation produced NaN/Inf; message names the operation."""


class DivergenceError(RuntimeError):
    """Training loss became non-finite; message carries the step number."""
