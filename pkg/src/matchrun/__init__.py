"""Sequential organ-offer simulation, structural estimation, and counterfactuals."""

__version__ = "0.1.0"

from .beliefs import InfoRegime
from .core import COVARIATE_NAMES, ModelParams
from .policies import PriorityPolicy

__all__ = [
    "COVARIATE_NAMES",
    "InfoRegime",
    "ModelParams",
    "PriorityPolicy",
    "__version__",
]
