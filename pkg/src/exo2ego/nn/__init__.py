from .tensor import Tensor, as_tensor, concat, grad_enabled, layer_norm, no_grad, pad_axis, rms_norm, softmax, stack
from .modules import (
    Attention,
    CausalConv1d,
    DepthwiseConv1d,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    Parameter,
    RMSNorm,
    apply_rotary,
    lecun_normal,
    merge_heads,
    split_heads,
)
from .optim import Adam, clip_grad_norm, cosine_lr

__all__ = [
    "Adam",
    "Attention",
    "CausalConv1d",
    "DepthwiseConv1d",
    "FeedForward",
    "LayerNorm",
    "Linear",
    "Module",
    "Parameter",
    "RMSNorm",
    "Tensor",
    "apply_rotary",
    "as_tensor",
    "clip_grad_norm",
    "concat",
    "cosine_lr",
    "grad_enabled",
    "layer_norm",
    "lecun_normal",
    "merge_heads",
    "no_grad",
    "pad_axis",
    "rms_norm",
    "softmax",
    "split_heads",
    "stack",
]
