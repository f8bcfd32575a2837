"""Minimal dense-tensor math with reverse-mode gradients."""

from .gradcheck import grad_check
from .optim import AdamW, TriangularSchedule
from .store import MissingTensorError, NamedTensorStore, StoreFormatError
from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    concat,
    default_dtype,
    depthwise_conv1d,
    div,
    dropout,
    exp,
    getitem,
    glu,
    grad_enabled,
    layer_norm,
    linear,
    log,
    log_softmax,
    make_op,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    precision,
    relu,
    reshape,
    set_default_dtype,
    sigmoid,
    silu,
    softmax,
    stack,
    sub,
    sum_,
    tanh,
    transpose,
)


def params_from_store(store: NamedTensorStore, trainable=None, prefix: str = "") -> dict:
    """Wrap store arrays as Tensors in the current compute dtype.

    ``trainable`` is a predicate on names (default: everything trainable).
    """
    out = {}
    for name, arr in store.items():
        if not name.startswith(prefix):
            continue
        req = True if trainable is None else bool(trainable(name))
        out[name] = Tensor(arr, requires_grad=req)
    return out


__all__ = [name for name in dir() if not name.startswith("_")]
