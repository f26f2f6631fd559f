"""Minimal reverse-mode autodiff over dense float64 tensors."""

from .gradcheck import GradCheckReport, check_gradients, numeric_gradient
from .ops import (
    GaussianLatent,
    add,
    as_tensor,
    avg_pool2d,
    bce_with_logits,
    clamp,
    concat,
    conv2d,
    element,
    exp,
    gaussian_kl,
    gaussian_kl_standard,
    global_avg_pool,
    linear,
    mean,
    mul,
    neg,
    relu,
    scale,
    sigmoid,
    slice_cols,
    softplus,
    sub,
    tsum,
)
from .tensor import Tensor, backward, grad_enabled, no_grad

__all__ = [
    "GaussianLatent",
    "GradCheckReport",
    "Tensor",
    "add",
    "as_tensor",
    "avg_pool2d",
    "backward",
    "bce_with_logits",
    "check_gradients",
    "clamp",
    "concat",
    "conv2d",
    "element",
    "exp",
    "gaussian_kl",
    "gaussian_kl_standard",
    "global_avg_pool",
    "grad_enabled",
    "linear",
    "mean",
    "mul",
    "neg",
    "no_grad",
    "numeric_gradient",
    "relu",
    "scale",
    "sigmoid",
    "slice_cols",
    "softplus",
    "sub",
    "tsum",
]
