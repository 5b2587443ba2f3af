"""Per-batch meta-parameter generation and adaptive logit fusion.

A small two-layer network reads pooled class statistics of every modality's
probability map and emits five scalars: two internal temperatures (t1, t2),
a fusion balance weight w_f in [0, 1], and the sharpness factors beta and
alpha for the smooth maximum / minimum pools.  The fused soft label is the
w_f-weighted blend of both pools over the present modalities.

Each raw network head p is range-mapped as sigmoid(p) * (hi - lo) + lo, so
all outputs stay inside their configured bounds for any head value.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import ops
from .tensor import Tensor, ShapeError, DomainError

FPSLD_BETA = 100.0
FPSLD_ALPHA = 100.0
FPSLD_WF = 0.5
FPSLD_T = 1.0

_HEAD_NAMES = ("t1", "t2", "w_f", "beta", "alpha")


@dataclass(frozen=True)
class MetaNetConfig:
    hidden: int = 16
    beta_range: tuple[float, float] = (1.0, 100.0)
    alpha_range: tuple[float, float] = (1.0, 100.0)
    wf_range: tuple[float, float] = (0.0, 1.0)
    t_range: tuple[float, float] = (0.5, 5.0)

    def __post_init__(self):
        for nm in ("beta_range", "alpha_range", "wf_range", "t_range"):
            lo, hi = getattr(self, nm)
            if not lo < hi:
                raise ValueError(f"{nm}: need lower < upper, got ({lo}, {hi})")
        if self.beta_range[0] <= 0 or self.alpha_range[0] <= 0:
            raise ValueError("beta and alpha lower bounds must be positive")

    def head_range(self, name: str) -> tuple[float, float]:
        return {
            "t1": self.t_range, "t2": self.t_range, "w_f": self.wf_range,
            "beta": self.beta_range, "alpha": self.alpha_range,
        }[name]


@dataclass
class MetaParams:
    """The five generated scalars, kept as tensors so gradients can flow."""

    t1: Tensor
    t2: Tensor
    w_f: Tensor
    beta: Tensor
    alpha: Tensor

    def as_floats(self) -> dict[str, float]:
        return {n: getattr(self, n).item() for n in _HEAD_NAMES}

    @classmethod
    def fixed(cls, dtype=np.float32) -> "MetaParams":
        mk = lambda v: Tensor(np.full(1, v, dtype=dtype))
        return cls(t1=mk(FPSLD_T), t2=mk(FPSLD_T), w_f=mk(FPSLD_WF),
                   beta=mk(FPSLD_BETA), alpha=mk(FPSLD_ALPHA))


class MetaNetwork:
    """Two affine layers with a relu between; five range-mapped scalar heads."""

    def __init__(self, in_dim: int, cfg: MetaNetConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.in_dim = in_dim
        self.dtype = np.dtype(dtype)
        std1 = np.sqrt(2.0 / in_dim)
        std2 = np.sqrt(2.0 / cfg.hidden)
        self.params: dict[str, Tensor] = {
            "fc1.w": Tensor((rng.standard_normal((cfg.hidden, in_dim)) * std1).astype(self.dtype), requires_grad=True),
            "fc1.b": Tensor(np.zeros(cfg.hidden, dtype=self.dtype), requires_grad=True),
        }
        for name in _HEAD_NAMES:
            self.params[f"head.{name}.w"] = Tensor(
                (rng.standard_normal(cfg.hidden) * std2).astype(self.dtype), requires_grad=True)
            self.params[f"head.{name}.b"] = Tensor(np.zeros(1, dtype=self.dtype), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name in self.params:
            if name not in state:
                raise ValueError(f"missing meta parameter {name}")
            self.params[name] = Tensor(state[name].astype(self.dtype), requires_grad=True)

    def forward(self, z: Tensor) -> MetaParams:
        if z.shape != (self.in_dim,):
            raise ShapeError(f"meta input must be [{self.in_dim}], got {z.shape}")
        h = ops.relu(ops.add(ops.matmul(self.params["fc1.w"], z), self.params["fc1.b"]))
        out = {}
        for name in _HEAD_NAMES:
            raw = ops.add(
                ops.reduce_sum(ops.mul(self.params[f"head.{name}.w"], h), keepdims=True),
                self.params[f"head.{name}.b"],
            )
            lo, hi = self.cfg.head_range(name)
            out[name] = ops.add(ops.scale(ops.sigmoid(raw), hi - lo), ops.const(np.full(1, lo), z))
        return MetaParams(t1=out["t1"], t2=out["t2"], w_f=out["w_f"],
                          beta=out["beta"], alpha=out["alpha"])


def meta_pool(probs: list[Tensor]) -> Tensor:
    """Spatial mean of every class channel, concatenated across modalities."""
    if not probs:
        raise ShapeError("meta_pool: need at least one probability map")
    shape = probs[0].shape
    for p in probs[1:]:
        if p.shape != shape:
            raise ShapeError(f"meta_pool: shapes differ, {p.shape} vs {shape}")
    pooled = [ops.global_avg_pool(p, axes=(1, 2, 3)) for p in probs]
    return ops.concat(pooled, axis=0)


def _single_modality(stack: Tensor) -> Tensor:
    # reduce over the 1-extent modality axis: exact identity, gradient 1
    return ops.reduce_sum(stack, axes=(0,))


def smooth_max(stack: Tensor, beta) -> Tensor:
    """Scaled log-sum-exp over the leading (modality) axis.

    ``beta`` may be a float (constant sharpness) or a scalar tensor
    (differentiable sharpness).  Larger beta approaches the hard maximum.
    """
    if stack.shape[0] == 1:
        return _single_modality(stack)
    if isinstance(beta, Tensor):
        scaled = ops.mul(stack, beta)
        lse = ops.log_sum_exp(scaled, axis=0, scale_factor=1.0)
        return ops.mul(lse, ops.reciprocal(beta))
    if beta <= 0:
        raise DomainError(f"smooth_max: beta must be positive, got {beta}")
    return ops.log_sum_exp(stack, axis=0, scale_factor=float(beta))


def smooth_min(stack: Tensor, alpha) -> Tensor:
    """Negated smooth maximum of the negated logits; approaches the hard min."""
    if stack.shape[0] == 1:
        return _single_modality(stack)
    if not isinstance(alpha, Tensor) and alpha <= 0:
        raise DomainError(f"smooth_min: alpha must be positive, got {alpha}")
    return ops.negate(smooth_max(ops.negate(stack), alpha))


def weighted_fuse(high: Tensor, low: Tensor, w_f) -> Tensor:
    """w_f * high + (1 - w_f) * low; w_f in [0, 1]."""
    if high.shape != low.shape:
        raise ShapeError(f"weighted_fuse: shapes differ, {high.shape} vs {low.shape}")
    if isinstance(w_f, Tensor):
        one = ops.const(np.ones(w_f.shape), w_f)
        return ops.add(ops.mul(high, w_f), ops.mul(low, ops.sub(one, w_f)))
    if not 0.0 <= w_f <= 1.0:
        raise DomainError(f"weighted_fuse: w_f must lie in [0, 1], got {w_f}")
    return ops.add(ops.scale(high, float(w_f)), ops.scale(low, 1.0 - float(w_f)))


def meta_amf(
    logits: list[Tensor],
    present: Iterable[int],
    net: MetaNetwork | None,
    cfg: MetaNetConfig,
    fpsld: bool = False,
    use_temperatures: bool = False,
) -> tuple[Tensor, MetaParams]:
    """Produce the fused soft label and the meta-parameters that shaped it.

    In adaptive mode the parameters come from ``net`` applied to pooled
    probabilities of all modalities (absent ones computed from zero-filled
    inputs, keeping the pooled vector's length fixed).  In fixed mode the
    network is bypassed and (beta, alpha, w_f) = (100, 100, 0.5).
    """
    idx = sorted(set(present))
    if not idx:
        raise ShapeError("meta_amf: empty modality set")
    if fpsld:
        mp = MetaParams.fixed(dtype=logits[0].dtype)
    else:
        if net is None:
            raise ValueError("meta_amf: adaptive mode needs a MetaNetwork")
        probs = [ops.softmax(l, axis=0) for l in logits]
        mp = net.forward(meta_pool(probs))

    hi_in = [logits[m] for m in idx]
    lo_in = hi_in
    if use_temperatures:
        hi_in = [ops.mul(l, ops.reciprocal(mp.t1)) for l in hi_in]
        lo_in = [ops.mul(l, ops.reciprocal(mp.t2)) for l in lo_in]
    stack_hi = ops.stack(hi_in, axis=0)
    stack_lo = stack_hi if lo_in is hi_in else ops.stack(lo_in, axis=0)
    if fpsld:
        high = smooth_max(stack_hi, FPSLD_BETA)
        low = smooth_min(stack_lo, FPSLD_ALPHA)
        s_meta = weighted_fuse(high, low, FPSLD_WF)
    else:
        high = smooth_max(stack_hi, mp.beta)
        low = smooth_min(stack_lo, mp.alpha)
        s_meta = weighted_fuse(high, low, mp.w_f)
    return s_meta, mp
