"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class ConfigurationError(ValueError):
    """A config value is invalid or inconsistent."""


class InputError(ValueError):
    """A runtime argument is out of its allowed domain."""


class FormatError(ValueError):
    """A serialized file is malformed."""


class StateError(RuntimeError):
    """An operation was called before its prerequisite state exists."""


class UnsupportedVariantError(ValueError):
    """The model variant does not support this operation."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared where only finite values are allowed."""


class TrainingAbort(RuntimeError):
    """Training stopped because of a non-recoverable numerical problem."""
