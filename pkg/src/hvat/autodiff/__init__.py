"""Small reverse-mode autodiff engine on top of numpy."""

from . import ops
from .gradcheck import OP_CASES, check_op, grad_check, grad_check_many, numeric_grad, relative_error
from .instrument import FlopCounter, count_flops, section
from .ops import (
    concat,
    dropout,
    embedding,
    expand_dims,
    layer_norm,
    log_softmax,
    matmul,
    mean,
    relu,
    reshape,
    sigmoid,
    softmax,
    swapaxes,
)
from .tensor import (
    Graph,
    GraphError,
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    debug_mode,
    is_debug,
    is_grad_enabled,
    no_grad,
    set_debug,
)

__all__ = [
    "Graph",
    "GraphError",
    "NonFiniteError",
    "OP_CASES",
    "ShapeError",
    "Tensor",
    "FlopCounter",
    "backward",
    "check_op",
    "concat",
    "count_flops",
    "debug_mode",
    "dropout",
    "embedding",
    "expand_dims",
    "grad_check",
    "grad_check_many",
    "is_debug",
    "is_grad_enabled",
    "layer_norm",
    "log_softmax",
    "matmul",
    "mean",
    "no_grad",
    "numeric_grad",
    "ops",
    "relative_error",
    "relu",
    "reshape",
    "section",
    "set_debug",
    "sigmoid",
    "softmax",
    "swapaxes",
]
