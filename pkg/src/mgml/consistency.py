"""Teacher-student consistency between full- and partial-modality passes.

The teacher is the same network in the same iteration, run on the full
modality set without recording gradients, so it adds no parameters or
update overhead.  The student's fused prediction is pulled toward the
teacher's through a temperature-scaled KL divergence averaged over voxels.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .data import VolumeSample, augment, flip_sample, rotate_sample, jitter_intensities
from .tensor import Tensor, ShapeError, no_grad


@dataclass(frozen=True)
class ConsistencyConfig:
    tau: float = 6.0
    teacher_augment: str = "strong"
    student_augment: str = "weak"

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")


def teacher_forward(model, sample: VolumeSample, cfg: ConsistencyConfig,
                    rng: np.random.Generator, flips: tuple[bool, bool, bool] | None = None):
    """Detached fused logits from a full-modality pass under teacher-level
    augmentation.

    When ``flips`` is given, the flip part of the augmentation is shared
    with the caller (keeping teacher and student roughly aligned for the
    voxelwise loss); rotation and intensity jitter stay teacher-only.
    """
    view = sample
    if cfg.teacher_augment != "none":
        if flips is not None:
            view = flip_sample(view, flips)
            if cfg.teacher_augment == "strong":
                plane = int(rng.integers(0, 3))
                angle = float(rng.uniform(-10.0, 10.0))
                view = rotate_sample(view, plane, angle)
                n = view.modalities.shape[0]
                scales = 1.0 + rng.uniform(-0.1, 0.1, size=n)
                shifts = rng.uniform(-0.1, 0.1, size=n)
                view = jitter_intensities(view, scales, shifts)
        else:
            view = augment(view, cfg.teacher_augment, rng)
    full = tuple(range(view.modalities.shape[0]))
    with no_grad():
        return model.forward_fused(view.modalities, full)


def consistency_loss(y_s: Tensor, y_t: Tensor, tau: float) -> Tensor:
    """Mean-over-voxels KL from teacher to student tempered distributions."""
    if y_s.shape != y_t.shape:
        raise ShapeError(f"consistency_loss: shapes differ, {y_s.shape} vs {y_t.shape}")
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    teacher = y_t.detach() if (y_t.tape is not None or y_t.requires_grad) else y_t
    p = ops.softmax(teacher, axis=0, temperature=tau)
    q = ops.softmax(y_s, axis=0, temperature=tau)
    per_voxel = ops.kl_div(p, q, axis=0)
    return ops.reduce_mean(per_voxel)
