from .config import BLOCK_KINDS, STEREO_MODES, TAC_ACTIVATIONS, ModelConfig
from .layers import (
    TAC,
    BandSplit,
    DilatedConvLayer,
    DualPathLayer,
    MaskEstimator,
    RecurrentLayer,
    SelfAttention,
    merge_heads,
    split_heads,
)
from .network import BandSplitRNN, apply_mask, build_model, count_params, count_pipeline_params

__all__ = [
    "BLOCK_KINDS",
    "STEREO_MODES",
    "TAC_ACTIVATIONS",
    "ModelConfig",
    "TAC",
    "BandSplit",
    "DilatedConvLayer",
    "DualPathLayer",
    "MaskEstimator",
    "RecurrentLayer",
    "SelfAttention",
    "merge_heads",
    "split_heads",
    "BandSplitRNN",
    "apply_mask",
    "build_model",
    "count_params",
    "count_pipeline_params",
]
