"""Minimal numpy autodiff engine used by all three embedding models."""
from . import tensor as F
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import gradcheck
from .layers import (CausalSelfAttention, Embedding, LayerNorm, Linear, Module, RMSNorm,
                     TransformerBlock)
from .optim import Adam, clip_global_norm, grad_norm, warmup_constant_lr
from .tensor import Parameter, SparseGrad, Tensor, no_grad

__all__ = [
    "F", "Tensor", "Parameter", "SparseGrad", "no_grad", "Module", "Linear", "Embedding",
    "RMSNorm", "LayerNorm", "CausalSelfAttention", "TransformerBlock", "Adam",
    "clip_global_norm", "grad_norm", "warmup_constant_lr", "gradcheck", "save_checkpoint",
    "load_checkpoint",
]
