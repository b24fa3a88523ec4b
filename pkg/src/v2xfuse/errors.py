"""Exception hierarchy shared across the package."""


class V2XFuseError(Exception):
    """Base class for all package errors."""


class ConfigError(V2XFuseError, ValueError):
    """Invalid parameters, sizes or configuration values."""


class ShapeError(V2XFuseError, ValueError):
    """Tensor shapes that cannot be combined."""


class DomainError(V2XFuseError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class ContractError(V2XFuseError, RuntimeError):
    """Caller violated an operation's preconditions."""


class GenerationError(V2XFuseError, RuntimeError):
    """Scene generation could not satisfy its constraints."""


class TrainingError(V2XFuseError, RuntimeError):
    """Training diverged."""

    def __init__(self, message, step):
        super().__init__(f"{message} (step {step})")
        self.step = step


class DecodeError(V2XFuseError, ValueError):
    """Malformed binary payload."""


class MagicError(DecodeError):
    pass


class VersionError(DecodeError):
    pass


class LengthError(DecodeError):
    pass
