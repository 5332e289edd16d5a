"""Dense float64 arithmetic with reverse-mode differentiation."""
from .gradcheck import grad_check
from .nn import (
    LN_EPS,
    MASK_FILL,
    affine,
    dropout,
    layer_norm,
    log_softmax,
    masked_logsumexp,
    scaled_dot_attention,
    softmax_rows,
)
from .module import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, key_mask_bias, xavier_uniform
from .rng import RngStream, as_stream
from .tensor import (
    DimensionError,
    NonFiniteError,
    Parameter,
    Tape,
    Tensor,
    abs_,
    add,
    as_tensor,
    concat,
    div,
    exp,
    log,
    matmul,
    maximum,
    mean,
    minimum,
    mul,
    neg,
    no_grad,
    relu,
    reshape,
    sigmoid,
    softplus,
    sqrt,
    stack,
    sub,
    sum_,
    take,
    transpose,
    where,
)

__all__ = [name for name in dir() if not name.startswith("_")]
