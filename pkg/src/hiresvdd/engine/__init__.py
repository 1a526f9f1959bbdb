"""Small differentiable numeric engine on numpy arrays."""

from .checkpoint import arrays_digest, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from .core import AdamState, Module, Parameter, ParamStore, Sequential, check_finite
from .gradcheck import grad_check, max_relative_error, numeric_grad, param_grad_check
from .layers import (
    Conv2d,
    GlobalAvgPool,
    LayerNorm,
    Linear,
    MaxPool2d,
    MeanPoolSeq,
    MultiHeadSelfAttention,
    ReLU,
    softmax,
)
from .losses import bce_with_logits, sigmoid, sigmoid_focal_loss
from .optim import TrainSchedule, adamw_step, cosine_lr

__all__ = [
    "AdamState", "Conv2d", "GlobalAvgPool", "LayerNorm", "Linear", "MaxPool2d", "MeanPoolSeq",
    "Module", "MultiHeadSelfAttention", "Parameter", "ParamStore", "ReLU", "Sequential",
    "TrainSchedule", "adamw_step", "arrays_digest", "bce_with_logits", "check_finite",
    "cosine_lr", "decode_checkpoint", "encode_checkpoint", "grad_check", "load_checkpoint",
    "max_relative_error", "numeric_grad", "param_grad_check", "save_checkpoint", "sigmoid",
    "sigmoid_focal_loss", "softmax",
]
