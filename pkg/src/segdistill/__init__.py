"""Multi-domain training and knowledge distillation for compact CPU
segmentation networks on synthetic street scenes."""

from .autodiff import Tape, Tensor, backward, grad_check, record, stop_recording
from .backend import active_backend
from .errors import (ConfigError, ContractError, DataError, DimensionError,
                     FormatError, NumericFaultError, ParameterError,
                     SegdistillError, UsageError)
from .rng import RngState

__version__ = "0.1.0"

__all__ = [
    "Tape", "Tensor", "backward", "grad_check", "record", "stop_recording",
    "active_backend", "RngState", "SegdistillError", "DimensionError",
    "ParameterError", "NumericFaultError", "ContractError", "ConfigError",
    "DataError", "FormatError", "UsageError", "__version__",
]
