"""Spatio-temporal action recognition with a 3D convolution and a sigmoid attention gate, in numpy."""

from .errors import (Attn3dError, ClipIOError, ConfigError, DataError, LabelError, NumericError,
                     ParameterError, RangeError, ShapeError)
from .model import Model, ModelConfig, build_model, parameter_count
from .tensor import Rng

__version__ = "0.1.0"

__all__ = [
    "Attn3dError", "ClipIOError", "ConfigError", "DataError", "LabelError", "NumericError",
    "ParameterError", "RangeError", "ShapeError", "Model", "ModelConfig", "build_model",
    "parameter_count", "Rng", "__version__",
]
