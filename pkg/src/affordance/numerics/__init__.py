"""Minimal float64 autodiff: tape, dense/conv ops, Adam, gradient checking."""
from . import kernels
from .gradcheck import GradCheckReport, gradient_check
from .optim import AdamState, adam_step
from .params import ParameterSet
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    add,
    add_bias,
    add_const,
    affine_const,
    as_tensor,
    broadcast_scalar,
    concat_cols,
    conv2d,
    deconv2d,
    gaussian_nll,
    linear,
    matmul,
    mean_rows,
    mean_scalars,
    mse,
    mul,
    relu,
    repeat_rows,
    reshape,
    scale,
    softplus,
    square,
    sub,
    sum_all,
    take_cols,
    tanh,
    weighted_sum,
)

BACKEND = kernels.BACKEND
