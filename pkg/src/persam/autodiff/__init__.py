"""Minimal dense-tensor reverse-mode autodiff on numpy."""

from .tensor import (
    BackwardError,
    DimensionError,
    DomainError,
    Tensor,
    add,
    as_tensor,
    concat,
    conv2d,
    div,
    dropout,
    exp,
    expm1,
    expand,
    getitem,
    is_grad_enabled,
    layer_norm,
    linear,
    log,
    log1p,
    matmul,
    maximum,
    mean,
    mul,
    neg,
    no_grad,
    relu,
    reshape,
    sigmoid,
    softmax,
    stack,
    sub,
    tanh,
    tmax,
    transpose,
    tsum,
)
from .gradcheck import numerical_grad, relative_error

__all__ = [name for name in dir() if not name.startswith("_")]
