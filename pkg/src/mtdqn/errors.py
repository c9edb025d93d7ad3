"""Exception types shared across the package."""


class MTDQNError(Exception):
    """Base class for all package errors."""


class DimensionError(MTDQNError, ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(MTDQNError, ValueError):
    """Input is too small or empty for the requested operation."""


class ContractError(MTDQNError, ValueError):
    """A documented precondition of an operation was violated."""


class ConfigurationError(MTDQNError, ValueError):
    """A configuration value is invalid or inconsistent."""


class ValidationError(MTDQNError, ValueError):
    """External data (events, config files) failed validation."""


class TapeStateError(MTDQNError, RuntimeError):
    """A tape was used after its backward pass, or misused otherwise."""


class NonFiniteError(MTDQNError, FloatingPointError):
    """An operation produced NaN or Inf."""


class StateError(MTDQNError, RuntimeError):
    """An object was used in a state that does not permit the call."""


class FormatError(MTDQNError, ValueError):
    """A persisted file is corrupt or has an unsupported format version."""
