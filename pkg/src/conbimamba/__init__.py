"""ConBiMamba speaker diarization on numpy: model, losses, pipeline and scoring."""

from .numcore import ConfigError, ContractError, DegenerateInputError, ShapeError, Tensor

__version__ = "0.1.0"

__all__ = ["ConfigError", "ContractError", "DegenerateInputError", "ShapeError", "Tensor", "__version__"]
