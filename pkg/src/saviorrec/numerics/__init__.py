from .checkpoint import load as load_tensors, save as save_tensors
from .nn import MLP, Linear, Module, param_rng
from .optim import Adagrad, AdagradState, adagrad_step
from .tensor import (
    Tensor,
    add,
    as_tensor,
    backward,
    bce_with_logits,
    concat,
    div,
    exp,
    getitem,
    l2_normalize,
    leaky_relu,
    log,
    logsumexp,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    sigmoid,
    softmax,
    softmax_rows,
    sqrt,
    square,
    stack,
    stop_gradient,
    sub,
    swapaxes,
    take_rows,
    tanh,
    transpose,
    tsum,
)
