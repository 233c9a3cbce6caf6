"""Vision transformer with peak suppression and knowledge guidance, on a small numpy autodiff engine."""
from ._kernels import BACKEND
from .model import MODES, TPSKGModel
from .tensor import Tape, Tensor, no_grad
from .vit import ModelConfig

__all__ = ["BACKEND", "MODES", "ModelConfig", "TPSKGModel", "Tape", "Tensor", "no_grad"]
__version__ = "0.1.0"
