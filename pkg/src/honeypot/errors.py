"""Exception types shared across the package."""


class HoneypotError(Exception):
    """Base class for all package errors."""


class ConfigError(HoneypotError, ValueError):
    """Invalid architecture, shape or experiment configuration."""


class UsageError(HoneypotError, ValueError):
    """A function was called with arguments violating its preconditions."""


class NumericError(HoneypotError, ArithmeticError):
    """NaN or Inf encountered where finite values are required."""


class TrainingError(NumericError):
    """Optimization diverged. Carries the stage and step where it happened."""

    def __init__(self, message, stage=None, step=None):
        super().__init__(message)
        self.stage = stage
        self.step = step


class CodecError(HoneypotError, ValueError):
    """Malformed binary file (bad magic, version, truncation...)."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
