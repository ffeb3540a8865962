"""Minimal reverse-mode autodiff, layers, Adam and gradient checking."""
from . import tensor as ops
from .checkpoint import CheckpointError, load as load_checkpoint, save as save_checkpoint
from .gradcheck import grad_check, relative_error
from .layers import (Conv1d, Dropout, Embedding, FeedForward, LayerNorm, Linear, Module,
                     MultiHeadAttention, NEG_INF, ReLU, Sigmoid, Softmax, causal_mask, padding_mask,
                     sinusoid_positions)
from .optim import Adam, AdamState, adam_step
from .tensor import NonFiniteError, ShapeError, Tensor, no_grad, precision

__all__ = [
    "ops", "Tensor", "NonFiniteError", "ShapeError", "no_grad", "precision",
    "Module", "Embedding", "Linear", "Conv1d", "LayerNorm", "Dropout", "ReLU", "Sigmoid",
    "Softmax", "FeedForward", "MultiHeadAttention", "NEG_INF", "causal_mask", "padding_mask",
    "sinusoid_positions", "Adam", "AdamState", "adam_step", "grad_check", "relative_error",
    "CheckpointError", "load_checkpoint", "save_checkpoint",
]
