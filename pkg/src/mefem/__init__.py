"""Self-supervised face-embedding pretraining toolkit.

Latent-prediction pretraining with axial stripe masking, circular loss
weighting, probabilistic CLS routing, an EMA teacher, and frozen-feature
probing, plus procedural data and a masking-bias analyzer for desk-scale
experiments.
"""

from .masking import GridSpec, MaskPair, MaskingConfig, MultiblockParams, StripeParams
from .tokens import ClsPolicy, TokenPartition
from .weights import WeightConfig, WeightMatrix, build_weight_matrix
from .config import TrainConfig

__all__ = [
    "GridSpec",
    "MaskPair",
    "MaskingConfig",
    "MultiblockParams",
    "StripeParams",
    "ClsPolicy",
    "TokenPartition",
    "WeightConfig",
    "WeightMatrix",
    "build_weight_matrix",
    "TrainConfig",
]

__version__ = "0.1.0"
