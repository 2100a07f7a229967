from felrec.numerics.ops import (
    batch_norm,
    dot,
    dropout,
    exp,
    gather,
    l2_normalize,
    layer_norm,
    log,
    log_softmax,
    masked_mean,
    relu,
    softmax,
)
from felrec.numerics.optim import (
    NonFiniteGradientError,
    OptimizerState,
    ScheduleConfig,
    cosine_lr,
    sgd_step,
)
from felrec.numerics.tensor import (
    ShapeError,
    Tensor,
    add,
    concat,
    div,
    linear,
    matmul,
    mean,
    mul,
    no_grad,
    reshape,
    stop_gradient,
    sub,
    transpose,
    tsum,
)

__all__ = [
    "NonFiniteGradientError",
    "OptimizerState",
    "ScheduleConfig",
    "ShapeError",
    "Tensor",
    "add",
    "batch_norm",
    "concat",
    "cosine_lr",
    "div",
    "dot",
    "dropout",
    "exp",
    "gather",
    "l2_normalize",
    "layer_norm",
    "linear",
    "log",
    "log_softmax",
    "masked_mean",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "relu",
    "reshape",
    "sgd_step",
    "softmax",
    "stop_gradient",
    "sub",
    "transpose",
    "tsum",
]
