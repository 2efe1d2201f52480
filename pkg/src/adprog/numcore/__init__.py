"""Minimal tensor library with reverse-mode autodiff, Adam and checkpoints."""
from .checkpoint import CheckpointError, checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint
from .optim import ParamStore, adam_step, clip_grad_norm, count_params, global_grad_norm
from .tensor import (
    ShapeError,
    Tensor,
    add,
    affine,
    concat,
    cross_entropy,
    dropout,
    dropout_mask,
    embedding_lookup,
    exp,
    is_grad_enabled,
    layer_norm,
    log,
    log_softmax,
    masked_fill,
    masked_mse,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    scale,
    sigmoid,
    slice_,
    softmax,
    square,
    stack,
    sub,
    sum_,
    swap_last,
    tanh,
    tensor,
    transpose,
    where,
)

__all__ = [name for name in dir() if not name.startswith("_")]
