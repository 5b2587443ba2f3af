"""Thin functional wrappers over the primitive set, plus a few composites.

Every function here bottoms out in :func:`mgml.tensor.apply_primitive`, so
gradients, determinism, and shape checking come from the engine.  Composites
(`log_softmax`, `reciprocal`, `softplus`) are built from listed primitives
rather than extending the primitive set.
"""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, apply_primitive


def const(value, like: Tensor | np.dtype | type) -> Tensor:
    dtype = like.dtype if isinstance(like, Tensor) else np.dtype(like)
    return Tensor(np.asarray(value, dtype=dtype))


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("add", [a, b])


def sub(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("sub", [a, b])


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("mul", [a, b])


def scale(a: Tensor, factor: float) -> Tensor:
    return apply_primitive("scale", [a], {"factor": factor})


def negate(a: Tensor) -> Tensor:
    return apply_primitive("negate", [a])


def relu(a: Tensor) -> Tensor:
    return apply_primitive("relu", [a])


def sigmoid(a: Tensor) -> Tensor:
    return apply_primitive("sigmoid", [a])


def exp(a: Tensor) -> Tensor:
    return apply_primitive("exp", [a])


def log(a: Tensor) -> Tensor:
    return apply_primitive("log", [a])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("matmul", [a, b])


def softmax(a: Tensor, axis: int = 0, temperature: float = 1.0) -> Tensor:
    return apply_primitive("softmax", [a], {"axis": axis, "temperature": temperature})


def log_sum_exp(a: Tensor, axis: int = 0, scale_factor: float = 1.0, keepdims: bool = False) -> Tensor:
    return apply_primitive("log_sum_exp", [a], {"axis": axis, "scale": scale_factor, "keepdims": keepdims})


def global_avg_pool(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    return apply_primitive("global_avg_pool", [a], {"axes": axes})


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    return apply_primitive("concat", parts, {"axis": axis})


def stack(parts: list[Tensor], axis: int = 0) -> Tensor:
    return apply_primitive("stack", parts, {"axis": axis})


def elementwise_mask(a: Tensor, mask: np.ndarray) -> Tensor:
    return apply_primitive("elementwise_mask", [a], {"mask": mask})


def reduce_sum(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    return apply_primitive("reduce_sum", [a], {"axes": axes, "keepdims": keepdims})


def reduce_mean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    return apply_primitive("reduce_mean", [a], {"axes": axes, "keepdims": keepdims})


def kl_div(p: Tensor, q: Tensor, axis: int = 0) -> Tensor:
    return apply_primitive("kl_div", [p, q], {"axis": axis})


def conv3d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    inputs = [x, w] if bias is None else [x, w, bias]
    return apply_primitive("conv3d", inputs, {"stride": stride})


def transposed_upsample3d(x: Tensor, factor: int = 2) -> Tensor:
    return apply_primitive("transposed_upsample3d", [x], {"factor": factor})


# --- composites -------------------------------------------------------------

def reciprocal(a: Tensor) -> Tensor:
    """1/a for strictly positive a, differentiable through exp/log."""
    return exp(negate(log(a)))


def log_softmax(a: Tensor, axis: int = 0, temperature: float = 1.0) -> Tensor:
    """Numerically safe log of the (temperature-scaled) softmax."""
    z = scale(a, 1.0 / temperature) if temperature != 1.0 else a
    lse = log_sum_exp(z, axis=axis, scale_factor=1.0, keepdims=True)
    return sub(z, lse)


def softplus(a: Tensor) -> Tensor:
    """ln(1 + e^a) computed without overflow: relu(a) + ln(1 + e^-|a|)."""
    mag = add(relu(a), relu(negate(a)))
    return add(relu(a), log(add(const(1.0, a), exp(negate(mag)))))
