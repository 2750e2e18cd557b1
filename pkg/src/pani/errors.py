"""Exception types shared across the package."""


class PaniError(Exception):
    """Base class for all library errors."""


class DimensionError(PaniError, ValueError):
    """Array shapes do not agree with an operation's contract."""


class ContractError(PaniError, ValueError):
    """A precondition other than a shape rule was violated."""


class ConfigError(PaniError, ValueError):
    """Invalid configuration (bad key, type, or hyperparameter bound)."""


class FormatError(PaniError, ValueError):
    """A binary file does not match its declared format."""


class DegenerateDirectionError(PaniError, ArithmeticError):
    """A perturbation direction has zero norm and cannot be normalized."""


class NonFiniteError(PaniError, FloatingPointError):
    """An operation produced NaN or Inf."""


class TruncatedFileError(FormatError):
    """A binary file ends before its declared payload."""
