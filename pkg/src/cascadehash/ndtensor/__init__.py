from .core import (
    ConfigurationError,
    ShapeError,
    Tape,
    TapeEntry,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    div,
    log,
    matmul,
    mean,
    mul,
    power,
    relu,
    reshape,
    scale,
    softplus,
    sub,
    transpose,
    tsum,
)
from .gradcheck import check_gradients, numerical_grad, relative_error
from .linalg import ConvergenceError, SingularMatrixError, solve_spd, svd_small
from .nn import conv2d, global_avg_pool, grid_sample, maxpool2, softmax_cross_entropy

__all__ = [
    "ConfigurationError",
    "ConvergenceError",
    "ShapeError",
    "SingularMatrixError",
    "Tape",
    "TapeEntry",
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "check_gradients",
    "concat",
    "conv2d",
    "div",
    "global_avg_pool",
    "grid_sample",
    "log",
    "matmul",
    "maxpool2",
    "mean",
    "mul",
    "numerical_grad",
    "power",
    "relative_error",
    "relu",
    "reshape",
    "scale",
    "softmax_cross_entropy",
    "softplus",
    "solve_spd",
    "sub",
    "svd_small",
    "transpose",
    "tsum",
]
