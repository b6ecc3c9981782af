"""ALiBi attention biases with linear position interpolation, plus a toy byte-level LM."""

__version__ = "0.1.0"

from .alibi import (
    BiasTensor,
    PiConfig,
    SlopeSet,
    attention,
    bias_row,
    build_bias_matrix,
    compute_slopes,
    decode_bias_row,
    scale_factor,
    scaled_slopes,
)
from .checkpoint import ModelCheckpoint, load_checkpoint, save_checkpoint
from .model import KVCache, ModelConfig, TransformerLM, forward, greedy_generate, loss_and_grads

__all__ = [
    "BiasTensor",
    "PiConfig",
    "SlopeSet",
    "attention",
    "bias_row",
    "build_bias_matrix",
    "compute_slopes",
    "decode_bias_row",
    "scale_factor",
    "scaled_slopes",
    "ModelCheckpoint",
    "load_checkpoint",
    "save_checkpoint",
    "KVCache",
    "ModelConfig",
    "TransformerLM",
    "forward",
    "greedy_generate",
    "loss_and_grads",
]
