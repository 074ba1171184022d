"""Exception hierarchy shared across the package."""


class HrtError(Exception):
    """Base class for all errors raised by hrtrader."""


class ValidationError(HrtError, ValueError):
    """Input failed a precondition before any computation ran."""


# marketdata
class MissingTicker(ValidationError):
    pass


class MalformedRow(ValidationError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class EmptyIntersection(ValidationError):
    pass


class LastDay(ValidationError, IndexError):
    pass


class InvalidSpec(ValidationError):
    pass


# nn
class ShapeMismatch(ValidationError):
    pass


class ArchitectureMismatch(ValidationError):
    pass


class NonFiniteGradient(HrtError, FloatingPointError):
    pass


# env
class FrameTooShort(ValidationError):
    pass


class NonFiniteSizes(ValidationError):
    pass


# agents
class NonFiniteLoss(HrtError, FloatingPointError):
    def __init__(self, message: str, step: int | None = None):
        self.step = step
        super().__init__(message if step is None else f"{message} (step {step})")


class BufferTooSmall(HrtError):
    pass


# checkpoints
class ChecksumError(HrtError):
    pass


class VersionError(HrtError):
    pass


# backtest
class DimensionMismatch(ValidationError):
    pass


class ZeroVolatility(HrtError, ZeroDivisionError):
    pass


class UnmappedTicker(ValidationError, KeyError):
    pass


class ConfigError(ValidationError):
    pass
