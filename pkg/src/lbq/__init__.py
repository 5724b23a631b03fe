"""Low-bit (W8A8 / W4A8) post-training quantization toolkit."""

from .errors import ConfigError, DimensionError, FormatError, InputError, InvariantError, LBQError, RangeError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DimensionError",
    "FormatError",
    "InputError",
    "InvariantError",
    "LBQError",
    "RangeError",
]
