from .gradcheck import grad_check
from .optim import Adam, AdamState, adam_step, clip_grad_norm
from .tensor import (
    GradTape,
    Tensor,
    backward,
    clip,
    concat,
    cross_entropy,
    embedding,
    exp,
    gather_last,
    gelu,
    layer_norm,
    log,
    log_softmax,
    masked_fill,
    matmul,
    minimum,
    no_grad,
    softmax,
    tanh,
)

__all__ = [
    "Adam",
    "AdamState",
    "GradTape",
    "Tensor",
    "adam_step",
    "backward",
    "clip",
    "clip_grad_norm",
    "concat",
    "cross_entropy",
    "embedding",
    "exp",
    "gather_last",
    "gelu",
    "grad_check",
    "layer_norm",
    "log",
    "log_softmax",
    "masked_fill",
    "matmul",
    "minimum",
    "no_grad",
    "softmax",
    "tanh",
]
