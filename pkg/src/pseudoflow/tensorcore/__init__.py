"""Dense tensors with reverse-mode differentiation, sized for desk-scale
flow models: elementwise math, matmul, conv2d, pooling, bilinear sampling
and a finite-difference gradient auditor."""

from .autodiff import (
    NonFiniteError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    abs_,
    active_tape,
    add,
    as_tensor,
    concat,
    div,
    exp,
    getitem,
    log,
    matmul,
    mean,
    mul,
    neg,
    pow_const,
    relu,
    reshape,
    sigmoid,
    sqrt,
    sub,
    sum_,
    tanh,
    transpose,
)
from .gradcheck import OP_CHECKS, OpCheck, audit_ops, grad_check
from .nnops import (
    avgpool2d,
    conv2d,
    conv_out_dim,
    gather_bilinear,
    sample_bilinear,
    upsample_bilinear,
)
