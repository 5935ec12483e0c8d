"""Memory-cached Conformer TTS acoustic model with linear attention and
paragraph-level text context, at desk scale with synthetic weights."""
from .tensor import (ConfigurationError, ContractError, DimensionError, GradTape, Tensor, backward,
                     count_macs, stop_gradient)

__version__ = "0.1.0"

__all__ = [
    "Tensor", "GradTape", "backward", "stop_gradient", "count_macs",
    "DimensionError", "ContractError", "ConfigurationError",
]
