"""Dense tensors over numpy arrays with a reverse-mode gradient tape.

The engine is deliberately small: a fixed set of primitives, a tape that
records primitive applications in execution order, and a backward pass that
walks the tape once in reverse.  Three constraints shape the implementation:

* bit determinism: reductions use fixed sequential orders, gradient
  accumulation follows tape order, and no primitive parallelises internally;
* numerical range: exponential-family primitives are max-shift stabilised
  so sharpness scales up to 1e4 stay finite;
* dual precision: float32 for training, float64 for finite-difference
  verification; dtypes never mix silently.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np


class TensorError(ValueError):
    """Base error for engine misuse."""


class ShapeError(TensorError):
    """Input shapes do not conform to a primitive's rule."""


class DomainError(TensorError):
    """A primitive was asked to produce a non-finite value."""


_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """An n-dimensional real array, optionally tracked on a gradient tape."""

    __slots__ = ("data", "requires_grad", "node_id", "tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id: int | None = None
        self.tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Value copy with no tape attachment; gradients never flow through it."""
        return Tensor(self.data.copy(), requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


@dataclass
class TapeNode:
    """One recorded primitive application (or a leaf registration)."""

    op: str
    inputs: tuple  # node id per input, None for untracked inputs
    attrs: dict
    saved: tuple   # values the backward rule needs
    shape: tuple


_ACTIVE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_ACTIVE, "stack", None)
    if stack is None:
        stack = []
        _ACTIVE.stack = stack
    return stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class no_grad:
    """Context that suspends recording; forward values are computed as usual."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False


class Tape:
    """Single-owner record of primitive applications, replayed in reverse.

    Nodes are topologically ordered by construction (a node is appended only
    after its inputs exist), so backward is a single reverse sweep with
    deterministic accumulation order.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.grads: dict[int, np.ndarray] | None = None

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def _register_leaf(self, t: Tensor) -> int:
        if t.tape is self and t.node_id is not None:
            return t.node_id
        nid = len(self.nodes)
        self.nodes.append(TapeNode("leaf", (), {}, (), t.shape))
        t.tape = self
        t.node_id = nid
        return nid

    def _record(self, op: str, input_ids, attrs: dict, saved: tuple, out: Tensor) -> None:
        nid = len(self.nodes)
        self.nodes.append(TapeNode(op, tuple(input_ids), attrs, saved, out.shape))
        out.tape = self
        out.node_id = nid
        out.requires_grad = True

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(node) for every tracked node, leaves included."""
        if loss.tape is not self or loss.node_id is None:
            raise TensorError("backward: loss is not on this tape")
        if loss.size != 1:
            raise ShapeError(f"backward: loss must be scalar-shaped, got {loss.shape}")
        grads: dict[int, np.ndarray] = {
            loss.node_id: np.ones(loss.shape, dtype=loss.dtype)
        }
        for nid in range(loss.node_id, -1, -1):
            node = self.nodes[nid]
            g = grads.get(nid)
            if g is None or node.op == "leaf":
                continue
            input_grads = PRIMITIVES[node.op].backward(g, node)
            for iid, ig in zip(node.inputs, input_grads):
                if iid is None or ig is None:
                    continue
                acc = grads.get(iid)
                grads[iid] = ig if acc is None else acc + ig
        self.grads = grads
        return grads

    def grad(self, t: Tensor) -> np.ndarray | None:
        """Gradient for a tensor after backward(); zeros if tracked but unreached."""
        if self.grads is None or t.tape is not self or t.node_id is None:
            return None
        g = self.grads.get(t.node_id)
        if g is None:
            return np.zeros(t.shape, dtype=t.dtype)
        return g


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable[[list[np.ndarray], dict], tuple[np.ndarray, tuple]]
    backward: Callable[[np.ndarray, TapeNode], tuple]


PRIMITIVES: dict[str, Primitive] = {}


def _primitive(name: str):
    def wrap(fwd):
        def register(bwd):
            PRIMITIVES[name] = Primitive(name, fwd, bwd)
            return bwd
        return register
    return wrap


def apply_primitive(name: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Run one primitive, recording a tape node when any input is tracked."""
    prim = PRIMITIVES.get(name)
    if prim is None:
        raise TensorError(f"unknown primitive {name!r}")
    attrs = dict(attrs) if attrs else {}
    datas = [t.data for t in inputs]
    dtypes = {d.dtype for d in datas}
    if len(dtypes) > 1:
        raise TensorError(f"{name}: mixed dtypes {sorted(str(d) for d in dtypes)}")
    out_data, saved = prim.forward(datas, attrs)
    out = Tensor(out_data)
    tape = current_tape()
    if tape is not None and any(
        t.requires_grad or (t.tape is tape and t.node_id is not None) for t in inputs
    ):
        ids = []
        for t in inputs:
            if t.tape is tape and t.node_id is not None:
                ids.append(t.node_id)
            elif t.requires_grad:
                ids.append(tape._register_leaf(t))
            else:
                ids.append(None)
        tape._record(name, ids, attrs, saved, out)
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers (only what the primitives need: equal shapes, scalars,
# or equal-rank shapes with 1-extents)

def _is_scalar_shape(s: tuple) -> bool:
    return s == () or s == (1,)

def _bcast_shape(name: str, sa: tuple, sb: tuple) -> tuple:
    if sa == sb:
        return sa
    if _is_scalar_shape(sa):
        return sb
    if _is_scalar_shape(sb):
        return sa
    if len(sa) == len(sb) and all(x == y or x == 1 or y == 1 for x, y in zip(sa, sb)):
        return tuple(max(x, y) for x, y in zip(sa, sb))
    raise ShapeError(f"{name}: shapes {sa} and {sb} do not conform")

def _unbcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum(), dtype=g.dtype)
    if shape == (1,):
        return g.sum(dtype=g.dtype).reshape(1)
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)

def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(a % ndim for a in axes))


# ---------------------------------------------------------------------------
# elementwise arithmetic

@_primitive("add")
def _add_fwd(datas, attrs):
    a, b = datas
    _bcast_shape("add", a.shape, b.shape)
    return a + b, (a.shape, b.shape)

@_add_fwd
def _add_bwd(g, node):
    sa, sb = node.saved
    return _unbcast(g, sa), _unbcast(g, sb)


@_primitive("sub")
def _sub_fwd(datas, attrs):
    a, b = datas
    _bcast_shape("sub", a.shape, b.shape)
    return a - b, (a.shape, b.shape)

@_sub_fwd
def _sub_bwd(g, node):
    sa, sb = node.saved
    return _unbcast(g, sa), _unbcast(-g, sb)


@_primitive("mul")
def _mul_fwd(datas, attrs):
    a, b = datas
    _bcast_shape("mul", a.shape, b.shape)
    return a * b, (a, b)

@_mul_fwd
def _mul_bwd(g, node):
    a, b = node.saved
    return _unbcast(g * b, a.shape), _unbcast(g * a, b.shape)


@_primitive("scale")
def _scale_fwd(datas, attrs):
    (a,) = datas
    return a * float(attrs["factor"]), ()

@_scale_fwd
def _scale_bwd(g, node):
    return (g * float(node.attrs["factor"]),)


@_primitive("negate")
def _negate_fwd(datas, attrs):
    return -datas[0], ()

@_negate_fwd
def _negate_bwd(g, node):
    return (-g,)


@_primitive("relu")
def _relu_fwd(datas, attrs):
    (a,) = datas
    keep = a > 0
    return np.where(keep, a, a.dtype.type(0)), (keep,)

@_relu_fwd
def _relu_bwd(g, node):
    (keep,) = node.saved
    return (np.where(keep, g, g.dtype.type(0)),)


@_primitive("sigmoid")
def _sigmoid_fwd(datas, attrs):
    (a,) = datas
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out, (out,)

@_sigmoid_fwd
def _sigmoid_bwd(g, node):
    (out,) = node.saved
    return (g * out * (1.0 - out),)


@_primitive("exp")
def _exp_fwd(datas, attrs):
    out = np.exp(datas[0])
    return out, (out,)

@_exp_fwd
def _exp_bwd(g, node):
    return (g * node.saved[0],)


@_primitive("log")
def _log_fwd(datas, attrs):
    (a,) = datas
    if not np.all(a > 0):
        raise DomainError("log: input has nonpositive entries")
    return np.log(a), (a,)

@_log_fwd
def _log_bwd(g, node):
    return (g / node.saved[0],)


# ---------------------------------------------------------------------------
# matmul

@_primitive("matmul")
def _matmul_fwd(datas, attrs):
    a, b = datas
    if a.ndim != 2 or b.ndim not in (1, 2):
        raise ShapeError(f"matmul: ranks {a.ndim} x {b.ndim} unsupported")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    return a @ b, (a, b)

@_matmul_fwd
def _matmul_bwd(g, node):
    a, b = node.saved
    if b.ndim == 1:
        return np.outer(g, b), a.T @ g
    return g @ b.T, a.T @ g


# ---------------------------------------------------------------------------
# softmax / log-sum-exp (max-shift stabilised)

@_primitive("softmax")
def _softmax_fwd(datas, attrs):
    (x,) = datas
    axis = int(attrs.get("axis", 0)) % x.ndim
    temp = float(attrs.get("temperature", 1.0))
    if temp <= 0:
        raise DomainError(f"softmax: temperature must be positive, got {temp}")
    z = x / temp
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return out, (out, axis, temp)

@_softmax_fwd
def _softmax_bwd(g, node):
    out, axis, temp = node.saved
    dot = (g * out).sum(axis=axis, keepdims=True)
    return (out * (g - dot) / temp,)


@_primitive("log_sum_exp")
def _lse_fwd(datas, attrs):
    (x,) = datas
    axis = int(attrs.get("axis", 0)) % x.ndim
    scale = float(attrs.get("scale", 1.0))
    keepdims = bool(attrs.get("keepdims", False))
    if scale <= 0:
        raise DomainError(f"log_sum_exp: scale must be positive, got {scale}")
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(scale * (x - m))
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s) / x.dtype.type(scale)
    w = e / s  # softmax(scale * x) along axis
    if not keepdims:
        out = out.squeeze(axis=axis)
    return out, (w, axis, keepdims)

@_lse_fwd
def _lse_bwd(g, node):
    w, axis, keepdims = node.saved
    if not keepdims:
        g = np.expand_dims(g, axis)
    return (g * w,)


# ---------------------------------------------------------------------------
# reductions / pooling

@_primitive("reduce_sum")
def _rsum_fwd(datas, attrs):
    (x,) = datas
    axes = _norm_axes(attrs.get("axes"), x.ndim)
    keepdims = bool(attrs.get("keepdims", False))
    return x.sum(axis=axes, keepdims=keepdims), (x.shape, axes, keepdims)

@_rsum_fwd
def _rsum_bwd(g, node):
    shape, axes, keepdims = node.saved
    if not keepdims:
        for ax in axes:
            g = np.expand_dims(g, ax)
    return (np.broadcast_to(g, shape).copy(),)


@_primitive("reduce_mean")
def _rmean_fwd(datas, attrs):
    (x,) = datas
    axes = _norm_axes(attrs.get("axes"), x.ndim)
    keepdims = bool(attrs.get("keepdims", False))
    count = 1
    for ax in axes:
        count *= x.shape[ax]
    return x.sum(axis=axes, keepdims=keepdims) / x.dtype.type(count), (x.shape, axes, keepdims, count)

@_rmean_fwd
def _rmean_bwd(g, node):
    shape, axes, keepdims, count = node.saved
    if not keepdims:
        for ax in axes:
            g = np.expand_dims(g, ax)
    return (np.broadcast_to(g / g.dtype.type(count), shape).copy(),)


@_primitive("global_avg_pool")
def _gap_fwd(datas, attrs):
    (x,) = datas
    axes = _norm_axes(attrs.get("axes"), x.ndim)
    count = 1
    for ax in axes:
        count *= x.shape[ax]
    return x.sum(axis=axes) / x.dtype.type(count), (x.shape, axes, count)

@_gap_fwd
def _gap_bwd(g, node):
    shape, axes, count = node.saved
    for ax in axes:
        g = np.expand_dims(g, ax)
    return (np.broadcast_to(g / g.dtype.type(count), shape).copy(),)


# ---------------------------------------------------------------------------
# structure: concat / stack / masking

@_primitive("concat")
def _concat_fwd(datas, attrs):
    axis = int(attrs.get("axis", 0))
    ranks = {d.ndim for d in datas}
    if len(ranks) != 1:
        raise ShapeError(f"concat: mixed ranks {sorted(ranks)}")
    axis %= datas[0].ndim
    for d in datas[1:]:
        if d.shape[:axis] + d.shape[axis + 1:] != datas[0].shape[:axis] + datas[0].shape[axis + 1:]:
            raise ShapeError(f"concat: off-axis shapes differ, {[d.shape for d in datas]}")
    sizes = tuple(d.shape[axis] for d in datas)
    return np.concatenate(datas, axis=axis), (axis, sizes)

@_concat_fwd
def _concat_bwd(g, node):
    axis, sizes = node.saved
    splits = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, splits, axis=axis))


@_primitive("stack")
def _stack_fwd(datas, attrs):
    axis = int(attrs.get("axis", 0))
    shapes = {d.shape for d in datas}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ, {[d.shape for d in datas]}")
    return np.stack(datas, axis=axis), (axis, len(datas))

@_stack_fwd
def _stack_bwd(g, node):
    axis, n = node.saved
    return tuple(np.take(g, i, axis=axis) for i in range(n))


@_primitive("elementwise_mask")
def _mask_fwd(datas, attrs):
    (x,) = datas
    mask = np.asarray(attrs["mask"], dtype=x.dtype)
    out = x * mask
    if out.shape != x.shape:
        raise ShapeError(f"elementwise_mask: mask {mask.shape} would expand input {x.shape}")
    return out, (mask,)

@_mask_fwd
def _mask_bwd(g, node):
    (mask,) = node.saved
    return (g * mask,)


# ---------------------------------------------------------------------------
# KL divergence along an axis: sum_c p * (log p - log q), with 0 log 0 := 0

@_primitive("kl_div")
def _kl_fwd(datas, attrs):
    p, q = datas
    if p.shape != q.shape:
        raise ShapeError(f"kl_div: shapes differ, {p.shape} vs {q.shape}")
    axis = int(attrs.get("axis", 0)) % p.ndim
    if not np.all(q > 0):
        raise DomainError("kl_div: second distribution has nonpositive entries")
    if np.any(p < 0):
        raise DomainError("kl_div: first distribution has negative entries")
    pos = p > 0
    logp = np.log(np.where(pos, p, p.dtype.type(1)))
    logq = np.log(q)
    terms = np.where(pos, p * (logp - logq), p.dtype.type(0))
    return terms.sum(axis=axis), (p, q, pos, logp, logq, axis)

@_kl_fwd
def _kl_bwd(g, node):
    p, q, pos, logp, logq, axis = node.saved
    g = np.expand_dims(g, axis)
    gp = np.where(pos, logp - logq + 1.0, p.dtype.type(0)) * g
    gq = -(p / q) * g
    return gp, gq


# ---------------------------------------------------------------------------
# 3-d convolution, kernel 3x3x3, zero padding 1, stride 1 or 2.
# Direct convolution arithmetic, blocked through an im2col buffer so the
# channel/voxel contraction runs as one deterministic GEMM per call.

_K = 3
_PAD = 1

def _conv_out_extent(n: int, stride: int) -> int:
    return (n + 2 * _PAD - _K) // stride + 1

def _im2col(xp: np.ndarray, stride: int, do: int, ho: int, wo: int) -> np.ndarray:
    cin = xp.shape[0]
    n = do * ho * wo
    cols = np.empty((_K * _K * _K * cin, n), dtype=xp.dtype)
    dst = cols.reshape(_K * _K * _K * cin, do, ho, wo)
    i = 0
    for a in range(_K):
        for b in range(_K):
            for c in range(_K):
                dst[i * cin:(i + 1) * cin] = xp[:, a:a + (do - 1) * stride + 1:stride,
                                                b:b + (ho - 1) * stride + 1:stride,
                                                c:c + (wo - 1) * stride + 1:stride]
                i += 1
    return cols

def _pad_input(x: np.ndarray) -> np.ndarray:
    cin, d, h, w = x.shape
    xp = np.zeros((cin, d + 2 * _PAD, h + 2 * _PAD, w + 2 * _PAD), dtype=x.dtype)
    xp[:, _PAD:-_PAD, _PAD:-_PAD, _PAD:-_PAD] = x
    return xp

@_primitive("conv3d")
def _conv3d_fwd(datas, attrs):
    x, w = datas[0], datas[1]
    bias = datas[2] if len(datas) > 2 else None
    stride = int(attrs.get("stride", 1))
    if stride not in (1, 2):
        raise ShapeError(f"conv3d: stride must be 1 or 2, got {stride}")
    if x.ndim != 4 or w.ndim != 5:
        raise ShapeError(f"conv3d: need input [C,D,H,W] and kernel [O,C,3,3,3], got {x.shape}, {w.shape}")
    cout, cin = w.shape[0], w.shape[1]
    if w.shape[2:] != (_K, _K, _K):
        raise ShapeError(f"conv3d: kernel spatial dims must be 3x3x3, got {w.shape[2:]}")
    if x.shape[0] != cin:
        raise ShapeError(f"conv3d: input channels {x.shape[0]} != kernel channels {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv3d: bias shape {bias.shape} != ({cout},)")
    do, ho, wo = (_conv_out_extent(s, stride) for s in x.shape[1:])
    xp = _pad_input(x)
    cols = _im2col(xp, stride, do, ho, wo)
    # kernel flattened offset-major to match _im2col's row order
    wmat = w.transpose(2, 3, 4, 1, 0).reshape(-1, cout)
    out = (cols.T @ wmat).T.reshape(cout, do, ho, wo)
    if bias is not None:
        out += bias[:, None, None, None]
    return np.ascontiguousarray(out), (x, w, stride, bias is not None, (do, ho, wo))

@_conv3d_fwd
def _conv3d_bwd(g, node):
    x, w, stride, has_bias, (do, ho, wo) = node.saved
    cout, cin = w.shape[0], w.shape[1]
    n = do * ho * wo
    gmat = g.reshape(cout, n)
    xp = _pad_input(x)
    cols = _im2col(xp, stride, do, ho, wo)
    gw_mat = cols @ gmat.T                       # [27*cin, cout]
    gw = gw_mat.reshape(_K, _K, _K, cin, cout).transpose(4, 3, 0, 1, 2)
    wmat = w.transpose(2, 3, 4, 1, 0).reshape(-1, cout)
    gcols = wmat @ gmat                          # [27*cin, n]
    gxp = np.zeros_like(xp)
    i = 0
    for a in range(_K):
        for b in range(_K):
            for c in range(_K):
                gxp[:, a:a + (do - 1) * stride + 1:stride,
                    b:b + (ho - 1) * stride + 1:stride,
                    c:c + (wo - 1) * stride + 1:stride] += gcols[i * cin:(i + 1) * cin].reshape(cin, do, ho, wo)
                i += 1
    gx = gxp[:, _PAD:-_PAD, _PAD:-_PAD, _PAD:-_PAD]
    if has_bias:
        return np.ascontiguousarray(gx), np.ascontiguousarray(gw), g.sum(axis=(1, 2, 3))
    return np.ascontiguousarray(gx), np.ascontiguousarray(gw)


@_primitive("transposed_upsample3d")
def _up_fwd(datas, attrs):
    (x,) = datas
    factor = int(attrs.get("factor", 2))
    if x.ndim != 4:
        raise ShapeError(f"transposed_upsample3d: need [C,D,H,W], got {x.shape}")
    if factor < 1:
        raise ShapeError(f"transposed_upsample3d: factor must be >= 1, got {factor}")
    out = x.repeat(factor, axis=1).repeat(factor, axis=2).repeat(factor, axis=3)
    return out, (x.shape, factor)

@_up_fwd
def _up_bwd(g, node):
    (c, d, h, w), f = node.saved
    return (g.reshape(c, d, f, h, f, w, f).sum(axis=(2, 4, 6)),)


# ---------------------------------------------------------------------------
# central-difference verification

def grad_check(f, point, eps: float = 1e-5) -> float:
    """Max relative error between analytic gradients of ``f`` and central
    differences, evaluated in float64.

    ``f`` maps one tensor (or a sequence of tensors) to a scalar tensor and
    must be pure.  Error per coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    if not 1e-6 <= eps <= 1e-3:
        raise TensorError(f"grad_check: eps {eps} outside [1e-6, 1e-3]")
    single = isinstance(point, Tensor)
    pts_in = [point] if single else list(point)
    pts = [Tensor(p.data.astype(np.float64), requires_grad=True) for p in pts_in]

    def call():
        out = f(pts[0]) if single else f(*pts)
        if out.size != 1:
            raise ShapeError("grad_check: f must return a scalar tensor")
        val = out.item()
        if not np.isfinite(val):
            raise DomainError("grad_check: f is non-finite at the evaluation point")
        return out

    with Tape() as tape:
        loss = call()
        tape.backward(loss)
    analytic = [tape.grad(p) for p in pts]

    worst = 0.0
    for p, an in zip(pts, analytic):
        if an is None:
            an = np.zeros(p.shape, dtype=np.float64)
        flat = p.data.reshape(-1)
        aflat = an.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = call().item()
            flat[i] = orig - eps
            fm = call().item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            err = abs(aflat[i] - numeric) / max(1.0, abs(aflat[i]))
            if err > worst:
                worst = err
    return worst
