"""Patch-level neighborhood interpolation: Pani VAT, Pani MixUp and baselines on a numpy autodiff core."""

from pani.errors import (ConfigError, ContractError, DegenerateDirectionError, DimensionError, FormatError,
                         NonFiniteError, PaniError, TruncatedFileError)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "DegenerateDirectionError", "DimensionError", "FormatError",
    "NonFiniteError", "PaniError", "TruncatedFileError", "__version__",
]
