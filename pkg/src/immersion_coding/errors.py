"""Exception hierarchy.

Each top-level family maps to a CLI exit code (config 2, numeric 3,
protocol 4).
"""


class ImmersionError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(ImmersionError):
    """Invalid dimensions, scales, targets or files."""

    exit_code = 2


class EmptyKernelError(ConfigError):
    pass


class InvalidSchemeError(ConfigError):
    pass


class SchemeFormatError(ConfigError):
    """Bad magic, unsupported version or truncated scheme file."""


class NumericError(ImmersionError):
    """Non-finite values, rank deficiency, domain violations."""

    exit_code = 3

    def __init__(self, message, step=None):
        self.step = step
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)


class RankError(NumericError):
    pass


class GenerationError(NumericError):
    pass


class ControllerDomainError(NumericError):
    pass


class ScheduleMismatchError(NumericError):
    pass


class ProtocolError(ImmersionError):
    """Wire-level or session state-machine violation."""

    exit_code = 4

    def __init__(self, message, code=None, step=None):
        self.code = code
        self.step = step
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)


class FramingError(ProtocolError):
    pass
