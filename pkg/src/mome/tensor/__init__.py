from .core import Tape, Tensor, as_tensor, backward, current_tape, grad_enabled, make_op, no_grad, reset_tape
from .ops import (
    add,
    avg_pool3d,
    clip,
    concat,
    conv3d,
    div,
    exp,
    index,
    instance_norm,
    leaky_relu,
    log,
    mean,
    mul,
    neg,
    reshape,
    softmax,
    stack,
    sub,
    sum,
    upsample_nearest,
)

__all__ = [
    "Tape", "Tensor", "as_tensor", "backward", "current_tape", "grad_enabled", "make_op",
    "no_grad", "reset_tape", "add", "avg_pool3d", "clip", "concat", "conv3d", "div", "exp",
    "index", "instance_norm", "leaky_relu", "log", "mean", "mul", "neg", "reshape", "softmax",
    "stack", "sub", "sum", "upsample_nearest",
]
