"""Latent diffusion emulator for climate-model ensembles on a synthetic toy earth."""

from .core import (ConfigError, FormatError, GridSpec, InvalidFieldError, Normalizer, NumericError,
                   RangeError, ShapeError, SimSequence)

__version__ = "0.1.0"

__all__ = ["ConfigError", "FormatError", "GridSpec", "InvalidFieldError", "Normalizer", "NumericError",
           "RangeError", "ShapeError", "SimSequence", "__version__"]
