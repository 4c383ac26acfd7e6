"""Exception types raised across the package."""


class GEError(Exception):
    """Base class for all errors raised by gather_excite."""


class DimensionError(GEError, ValueError):
    """Tensor shapes are incompatible with an operation."""


class ConfigurationError(GEError, ValueError):
    """An operator, model or run was configured inconsistently."""


class StateError(GEError, RuntimeError):
    """An object is not in the state an operation requires."""


class UsageError(GEError, ValueError):
    """An API was called with arguments outside its contract."""


class FormatError(GEError, ValueError):
    """A binary file does not match its expected layout."""

    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        parts = [message]
        if offset is not None:
            parts.append(f"at byte offset {offset}")
        if path is not None:
            parts.append(f"in {path}")
        super().__init__(" ".join(parts))


class NumericalError(GEError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class CheckpointError(GEError):
    """Base class for checkpoint load failures."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointNameError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass
