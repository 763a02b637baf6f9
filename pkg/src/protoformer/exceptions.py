"""Exception and warning types raised across the package."""


class ProtoFormerError(Exception):
    """Base class for all package errors."""


class DimensionError(ProtoFormerError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(ProtoFormerError, ValueError):
    """A documented precondition of an operation was violated."""


class ConfigError(ProtoFormerError, ValueError):
    """Invalid configuration key, value or combination."""


class DatasetError(ProtoFormerError):
    """The dataset cannot satisfy a sampling request."""


class TensorFormatError(ProtoFormerError, ValueError):
    """A tensor file could not be parsed.

    ``offset`` is the byte offset at which parsing failed.
    """

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class NotFittedError(ProtoFormerError, AttributeError):
    """An estimator was used before ``fit``."""


class EmptySupportWarning(UserWarning):
    """The support mask has no foreground after resizing."""
