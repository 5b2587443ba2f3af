"""Confidence-guided voxel masking and masked soft-label distillation.

One binary voxel mask is drawn per iteration and shared by every modality's
prediction and by the soft label.  The drop probability of a voxel scales
with the overall fusion confidence (1 - w_f) and with the voxel's own
uncertainty (1 - max class probability), so unreliable voxels are excluded
from the distillation loss more often.  Dropped voxels are excluded from
every sum in the loss rather than zero-filled, which would otherwise inject
uniform targets after the softmax.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import ops
from .tensor import Tensor, ShapeError


class DegenerateMaskError(ValueError):
    """Every voxel was dropped; the masking policy ceiling is too aggressive."""


@dataclass(frozen=True)
class MaskPolicy:
    base_ratio: float = 0.3
    confidence_exponent: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.base_ratio < 1.0:
            raise ValueError(f"base_ratio must lie in [0, 1), got {self.base_ratio}")


@dataclass
class VoxelMask:
    """Shared keep/drop mask; 1 keeps a voxel, 0 drops it everywhere."""

    mask: np.ndarray            # [D, H, W], values {0.0, 1.0}
    kept_fraction: float
    seed: int | None = None


def gen_mask(
    s_meta: Tensor,
    w_f: float,
    policy: MaskPolicy,
    rng: np.random.Generator,
    seed: int | None = None,
) -> VoxelMask:
    """Sample the per-iteration voxel mask from the soft label's confidence.

    Drop probability per voxel: base_ratio * (1 - w_f) * (1 - conf)^exponent,
    where conf is the max class probability of softmax(s_meta) at the voxel.
    """
    if not 0.0 <= w_f <= 1.0:
        raise ValueError(f"w_f must lie in [0, 1], got {w_f}")
    logits = s_meta.data
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    conf = (e / e.sum(axis=0, keepdims=True)).max(axis=0)
    p_drop = policy.base_ratio * (1.0 - w_f) * (1.0 - conf) ** policy.confidence_exponent
    keep = (rng.random(conf.shape) >= p_drop).astype(np.float64)
    return VoxelMask(mask=keep, kept_fraction=float(keep.mean()), seed=seed)


def wce(
    pred_logits: Tensor,
    soft_logits: Tensor,
    mask: VoxelMask,
    tau: float,
    direction: str = "printed",
) -> Tensor:
    """Class-weighted cross entropy between tempered distributions on kept voxels.

    With p = softmax(pred/tau) and s = softmax(soft/tau), the class weight is
    w_c = 1 - (kept mass of class c) / (total kept mass) and the loss is
    -(1/n_kept) * sum_c w_c * sum_kept p_c * ln(s_c).  ``direction="standard"``
    swaps the roles inside the sum to the conventional -s_c * ln(p_c).
    """
    if pred_logits.shape != soft_logits.shape:
        raise ShapeError(f"wce: shapes differ, {pred_logits.shape} vs {soft_logits.shape}")
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if direction not in ("printed", "standard"):
        raise ValueError(f"unknown distillation direction {direction!r}")
    if pred_logits.shape[1:] != mask.mask.shape:
        raise ShapeError(f"wce: mask {mask.mask.shape} does not match voxels {pred_logits.shape[1:]}")
    n_kept = float(mask.mask.sum())
    if n_kept == 0:
        raise DegenerateMaskError("all voxels dropped; lower the mask base ratio")
    m = mask.mask[None].astype(str(pred_logits.dtype))

    p = ops.softmax(pred_logits, axis=0, temperature=tau)
    class_mass = ops.reduce_sum(ops.elementwise_mask(p, m), axes=(1, 2, 3))
    total_mass = ops.reduce_sum(class_mass, keepdims=True)
    weights = ops.sub(ops.const(np.ones(class_mass.shape), p),
                      ops.mul(class_mass, ops.reciprocal(total_mass)))

    if direction == "printed":
        log_s = ops.log_softmax(soft_logits, axis=0, temperature=tau)
        cross = ops.mul(p, log_s)
    else:
        s = ops.softmax(soft_logits, axis=0, temperature=tau)
        log_p = ops.log_softmax(pred_logits, axis=0, temperature=tau)
        cross = ops.mul(s, log_p)
    per_class = ops.reduce_sum(ops.elementwise_mask(cross, m), axes=(1, 2, 3))
    loss = ops.reduce_sum(ops.mul(weights, per_class))
    return ops.negate(ops.scale(loss, 1.0 / n_kept))


def soft_label_loss(
    logits: list[Tensor],
    present: Iterable[int],
    s_meta: Tensor,
    mask: VoxelMask,
    tau: float,
    direction: str = "printed",
) -> Tensor:
    """Mean masked cross entropy of each present modality against the soft label.

    The soft label stays on the tape: its gradient path is what trains the
    meta network.
    """
    idx = sorted(set(present))
    if not idx:
        raise ShapeError("soft_label_loss: empty modality set")
    total = wce(logits[idx[0]], s_meta, mask, tau, direction)
    for m in idx[1:]:
        total = ops.add(total, wce(logits[m], s_meta, mask, tau, direction))
    return ops.scale(total, 1.0 / len(idx))
