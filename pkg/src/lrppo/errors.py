"""Exception types shared across the package."""


class LrppoError(Exception):
    """Base class for all package errors."""


class ShapeError(LrppoError, ValueError):
    pass


class TapeError(LrppoError, RuntimeError):
    """A tape was replayed after its parameters changed, or misused."""


class NonFiniteError(LrppoError, FloatingPointError):
    """A loss or gradient contains NaN/Inf."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class LetorParseError(LrppoError, ValueError):
    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class DataError(LrppoError, ValueError):
    pass


class ConfigError(LrppoError, ValueError):
    pass


class CheckpointError(LrppoError, ValueError):
    pass
