"""CETNet-style hybrid vision backbones on a small NumPy autodiff engine."""

from .errors import (CetnetError, ConfigurationError, DimensionError, FormatError, NumericError,
                     PatternParseError, UsageError)
from .model import ModelConfig, PatternSpec, build_model, parse_pattern
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "CetnetError", "ConfigurationError", "DimensionError", "FormatError", "NumericError",
    "PatternParseError", "UsageError", "ModelConfig", "PatternSpec", "build_model", "parse_pattern",
    "Tensor", "backward", "no_grad",
]
