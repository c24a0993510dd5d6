"""Exception types shared across the package."""


class SonarMatchError(Exception):
    """Base class for all package errors."""


class ShapeError(SonarMatchError, ValueError):
    """Array extents do not fit the operation."""


class InputError(SonarMatchError, ValueError):
    """Argument values violate an operation's precondition."""


class ConfigError(SonarMatchError, ValueError):
    """A configuration or network spec cannot be honoured."""


class FormatError(SonarMatchError):
    """A file on disk is corrupt, truncated or of the wrong kind.

    Attributes:
        offset: byte offset at which the problem was detected, if known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SamplingError(SonarMatchError, RuntimeError):
    """Rejection sampling ran out of attempts."""


class DegenerateInputError(SonarMatchError, ValueError):
    """Input has no variance where the computation needs some."""
