"""Dense fp64 tensors with reverse-mode differentiation and training utilities."""
from mtdqn.numerics.gradcheck import check_gradients, finite_diff_grad, relative_error
from mtdqn.numerics.ops import (
    activation,
    add,
    add_bias,
    bce_with_logits,
    concat,
    dropout,
    elementwise,
    layer_norm,
    matmul,
    mul,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    rowwise_softmax,
    sigmoid,
    square,
    sub,
    take,
    tanh,
    transpose,
)
from mtdqn.numerics.optim import (
    AdamState,
    CosineSchedule,
    adam_step,
    clip_gradients,
    cosine_lr,
    global_norm,
)
from mtdqn.numerics.tensor import Tape, Tensor, active_tape, backward

__all__ = [
    "AdamState",
    "CosineSchedule",
    "Tape",
    "Tensor",
    "activation",
    "active_tape",
    "adam_step",
    "add",
    "add_bias",
    "backward",
    "bce_with_logits",
    "check_gradients",
    "clip_gradients",
    "concat",
    "cosine_lr",
    "dropout",
    "elementwise",
    "finite_diff_grad",
    "global_norm",
    "layer_norm",
    "matmul",
    "mul",
    "reduce_mean",
    "reduce_sum",
    "relative_error",
    "relu",
    "reshape",
    "rowwise_softmax",
    "sigmoid",
    "square",
    "sub",
    "take",
    "tanh",
    "transpose",
]
