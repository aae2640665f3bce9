"""Tensor core: numpy arrays on a reverse-mode tape, layers, Adam, seeded RNG."""

from . import core
from .conv import conv2d, conv_transpose2d
from .core import (
    NumericGuardError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    add,
    as_tensor,
    backward,
    broadcast_to,
    clamp_min,
    concat,
    depthwise_conv1d,
    div,
    exp,
    get_dtype,
    getitem,
    is_strict,
    layer_norm,
    linear_scan,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    one_hot,
    power,
    precision,
    relu,
    reshape,
    set_precision,
    sigmoid,
    silu,
    softmax,
    softplus,
    stack,
    stop_gradient,
    strict_mode,
    sub,
    sum_,
    tanh,
    transpose,
)
from .gradcheck import GradCheckReport, grad_check, rel_error
from .nn import MLP, Conv2d, ConvTranspose2d, LayerNorm, Linear, Module, Parameter
from .optim import Adam, adam_step, clip_by_global_norm, global_norm
from .rng import Rng

PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "power": power,
    "matmul": matmul,
    "exp": exp,
    "log": log,
    "softplus": softplus,
    "sigmoid": sigmoid,
    "silu": silu,
    "tanh": tanh,
    "relu": relu,
    "clamp_min": clamp_min,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "layer_norm": layer_norm,
    "concat": concat,
    "stack": stack,
    "slice": getitem,
    "reshape": reshape,
    "transpose": transpose,
    "broadcast": broadcast_to,
    "sum": sum_,
    "mean": mean,
    "conv2d": conv2d,
    "conv_transpose2d": conv_transpose2d,
    "depthwise_conv1d": depthwise_conv1d,
    "linear_scan": linear_scan,
    "one_hot": one_hot,
    "stop_gradient": stop_gradient,
}


def register_primitive(name: str, fn) -> None:
    PRIMITIVES[name] = fn


def apply_primitive(op_kind: str, *inputs, **attrs) -> Tensor:
    """Dispatch ``op_kind`` by name; see :data:`PRIMITIVES`."""
    try:
        fn = PRIMITIVES[op_kind]
    except KeyError:
        raise ValueError(f"unknown primitive {op_kind!r}") from None
    return fn(*inputs, **attrs)


def group_softmax(x, groups: int) -> Tensor:
    """Softmax over ``groups`` equal slices of the last axis."""
    x = as_tensor(x)
    lead = x.shape[:-1]
    y = softmax(reshape(x, lead + (groups, x.shape[-1] // groups)), axis=-1)
    return reshape(y, x.shape)
