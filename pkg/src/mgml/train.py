"""Training loop: loss assembly, Adam with a polynomial schedule, logging.

Five arms share one code path and differ only in which auxiliary losses are
gated in: ``baseline`` trains on the segmentation loss alone, ``cr`` adds
the teacher-student consistency term, ``meta_amf`` adds masked soft-label
distillation, ``mgml`` adds both, and ``fpsld`` is ``mgml`` with the
meta-parameters pinned instead of generated.  The distillation weight is
always derived from the temperature as 0.3 * tau^2 / 10 and is never set
directly.
"""
from __future__ import annotations

import dataclasses
import os
import time
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import ops
from .backbone import Backbone, BackboneConfig, save_checkpoint, load_checkpoint
from .consistency import ConsistencyConfig, consistency_loss, teacher_forward
from .data import (VolumeSample, flip_sample, jitter_intensities, random_crop,
                   read_dataset, rotate_sample)
from .distill import MaskPolicy, gen_mask, soft_label_loss
from .meta import MetaNetConfig, MetaNetwork, MetaParams, meta_amf
from .metrics import COMBOS
from .tensor import Tensor, Tape

ARMS = ("baseline", "cr", "meta_amf", "mgml", "fpsld")

_SL_ARMS = ("meta_amf", "mgml", "fpsld")
_CR_ARMS = ("cr", "mgml", "fpsld")


class TrainingDivergedError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # data / run
    data_dir: str = "data"
    arm: str = "mgml"
    seed: int = 1024
    epochs: int = 60
    iters_per_epoch: int = 50
    batch_size: int = 1
    # optimizer and schedule
    lr_init: float = 2e-4
    weight_decay: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    amsgrad: bool = False
    poly_power: float = 0.9
    # loss weights (the distillation weight is derived from tau)
    lambda1: float = 1.0
    tau: float = 6.0
    lambda3: float = 0.01
    # backbone
    modalities: int = 4
    classes: int = 4
    base_channels: int = 8
    depth: int = 3
    crop_size: int = 32
    # meta network
    meta_hidden: int = 16
    beta_min: float = 1.0
    beta_max: float = 100.0
    alpha_min: float = 1.0
    alpha_max: float = 100.0
    t_min: float = 0.5
    t_max: float = 5.0
    use_meta_temperatures: bool = False
    # distillation
    mask_base_ratio: float = 0.3
    mask_confidence_exponent: float = 1.0
    distill_direction: str = "printed"
    # segmentation supervision
    seg_supervision: str = "fused+per_modality"
    # augmentation
    teacher_augment: str = "strong"
    student_augment: str = "weak"

    def __post_init__(self):
        if self.arm not in ARMS:
            raise ConfigError(f"unknown arm {self.arm!r}; choose from {ARMS}")
        if self.batch_size != 1:
            raise ConfigError("only batch_size 1 is supported")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.seg_supervision not in ("fused", "fused+per_modality"):
            raise ConfigError(f"unknown seg_supervision {self.seg_supervision!r}")
        if self.distill_direction not in ("printed", "standard"):
            raise ConfigError(f"unknown distill_direction {self.distill_direction!r}")

    @property
    def lambda2(self) -> float:
        return 0.3 * self.tau ** 2 / 10.0

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            modalities=self.modalities, classes=self.classes,
            base_channels=self.base_channels, depth=self.depth,
            input_extent=self.crop_size,
        )

    def metanet_config(self) -> MetaNetConfig:
        return MetaNetConfig(
            hidden=self.meta_hidden,
            beta_range=(self.beta_min, self.beta_max),
            alpha_range=(self.alpha_min, self.alpha_max),
            t_range=(self.t_min, self.t_max),
        )

    def consistency_config(self) -> ConsistencyConfig:
        return ConsistencyConfig(
            tau=self.tau, teacher_augment=self.teacher_augment,
            student_augment=self.student_augment,
        )

    def mask_policy(self) -> MaskPolicy:
        return MaskPolicy(base_ratio=self.mask_base_ratio,
                          confidence_exponent=self.mask_confidence_exponent)


_BOOL_WORDS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def load_config(path) -> TrainConfig:
    """Parse a flat ``key = value`` text file into a TrainConfig."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
            key, val = (part.strip() for part in line.split("=", 1))
            if key == "lambda2":
                raise ConfigError(f"{path}:{lineno}: lambda2 is derived from tau and cannot be set")
            if key not in fields:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            ftype = fields[key].type
            if ftype == "bool":
                if val.lower() not in _BOOL_WORDS:
                    raise ConfigError(f"{path}:{lineno}: bad boolean {val!r}")
                values[key] = _BOOL_WORDS[val.lower()]
            elif ftype == "int":
                values[key] = int(val)
            elif ftype == "float":
                values[key] = float(val)
            else:
                values[key] = val
    return TrainConfig(**values)


def config_to_dict(cfg: TrainConfig) -> dict:
    return dataclasses.asdict(cfg)


def poly_lr(lr_init: float, epoch: int, max_epoch: int, power: float = 0.9) -> float:
    return lr_init * (1.0 - epoch / max_epoch) ** power


class Adam:
    """Classic Adam with coupled L2 decay; optional amsgrad variant.

    Parameters without a gradient this step are skipped entirely (no state
    update), so modules that never enter the graph stay bit-identical.
    """

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0, amsgrad: bool = False):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.amsgrad = amsgrad
        self.m = {n: np.zeros(p.shape, dtype=np.float64) for n, p in params.items()}
        self.v = {n: np.zeros(p.shape, dtype=np.float64) for n, p in params.items()}
        self.vmax = {n: np.zeros(p.shape, dtype=np.float64) for n, p in params.items()} if amsgrad else None
        self.t = {n: 0 for n in params}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        for name in self.params:
            g = grads.get(name)
            if g is None:
                continue
            p = self.params[name]
            g = g.astype(np.float64)
            if self.weight_decay:
                g = g + self.weight_decay * p.data.astype(np.float64)
            self.t[name] += 1
            t = self.t[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            mhat = self.m[name] / (1 - self.beta1 ** t)
            vhat = self.v[name] / (1 - self.beta2 ** t)
            if self.amsgrad:
                np.maximum(self.vmax[name], vhat, out=self.vmax[name])
                vhat = self.vmax[name]
            update = lr * mhat / (np.sqrt(vhat) + self.eps)
            p.data = (p.data.astype(np.float64) - update).astype(p.dtype)


def sample_modality_subset(rng: np.random.Generator) -> tuple[int, ...]:
    """Uniform draw over the fifteen nonempty subsets of the four modalities."""
    return COMBOS[int(rng.integers(0, len(COMBOS)))]


@dataclass
class LossBreakdown:
    l_seg: float
    l_sl: float
    l_cr: float
    total: float


def _one_hot(labels: np.ndarray, classes: int, dtype) -> np.ndarray:
    out = np.zeros((classes,) + labels.shape, dtype=dtype)
    for c in range(classes):
        out[c] = labels == c
    return out


def _ce_and_soft_dice(logits: Tensor, onehot: np.ndarray) -> Tensor:
    """Cross entropy plus (1 - mean foreground soft Dice), both voxel-averaged."""
    voxels = float(np.prod(logits.shape[1:]))
    target = Tensor(onehot)
    logp = ops.log_softmax(logits, axis=0)
    ce = ops.negate(ops.scale(ops.reduce_sum(ops.mul(logp, target)), 1.0 / voxels))

    probs = ops.softmax(logits, axis=0)
    eps = 1e-5
    overlap = ops.reduce_sum(ops.mul(probs, target), axes=(1, 2, 3))
    p_sum = ops.reduce_sum(probs, axes=(1, 2, 3))
    g_sum = onehot.sum(axis=(1, 2, 3))
    denom = ops.add(p_sum, ops.const(g_sum + eps, logits))
    dice_vec = ops.mul(ops.scale(overlap, 2.0), ops.reciprocal(denom))
    fg = np.ones(logits.shape[0], dtype=str(logits.dtype))
    fg[0] = 0.0
    fg_mean = ops.scale(ops.reduce_sum(ops.elementwise_mask(dice_vec, fg)),
                        1.0 / float(logits.shape[0] - 1))
    dice_loss = ops.sub(ops.const(1.0, logits), fg_mean)
    return ops.add(ce, dice_loss)


def seg_loss(fused: Tensor, logits: list[Tensor], present: Iterable[int],
             labels: np.ndarray, supervision: str = "fused+per_modality") -> Tensor:
    """Segmentation loss on the fused head, optionally deep-supervising each
    present modality branch with the same CE + soft Dice pair."""
    onehot = _one_hot(labels, fused.shape[0], str(fused.dtype))
    total = _ce_and_soft_dice(fused, onehot)
    if supervision == "fused+per_modality":
        idx = sorted(set(present))
        per = _ce_and_soft_dice(logits[idx[0]], onehot)
        for m in idx[1:]:
            per = ops.add(per, _ce_and_soft_dice(logits[m], onehot))
        total = ops.add(total, ops.scale(per, 1.0 / len(idx)))
    return total


def total_loss(l_seg: Tensor, l_sl: Tensor | None, l_cr: Tensor | None, cfg: TrainConfig) -> Tensor:
    out = ops.scale(l_seg, cfg.lambda1)
    if l_sl is not None:
        out = ops.add(out, ops.scale(l_sl, cfg.lambda2))
    if l_cr is not None:
        out = ops.add(out, ops.scale(l_cr, cfg.lambda3))
    return out


@dataclass
class TrainResult:
    checkpoint: str
    train_log: str
    meta_log: str | None
    final: LossBreakdown
    wall_seconds: float


def build_model(cfg: TrainConfig, seed: int | None = None) -> tuple[Backbone, MetaNetwork]:
    """Backbone and meta network from one seeded init stream; every arm
    constructs both so initial states match bit-for-bit across arms."""
    ss = np.random.SeedSequence(cfg.seed if seed is None else seed)
    init_rng = np.random.Generator(np.random.PCG64(ss.spawn(1)[0]))
    backbone = Backbone(cfg.backbone_config(), init_rng)
    metanet = MetaNetwork(cfg.modalities * cfg.classes, cfg.metanet_config(), init_rng)
    return backbone, metanet


def model_parameters(backbone: Backbone, metanet: MetaNetwork) -> dict[str, Tensor]:
    params = {f"backbone.{n}": p for n, p in backbone.parameters().items()}
    params.update({f"meta.{n}": p for n, p in metanet.parameters().items()})
    return params


def load_model(checkpoint_path) -> tuple[TrainConfig, Backbone, MetaNetwork]:
    config, state = load_checkpoint(checkpoint_path)
    cfg = TrainConfig(**config)
    backbone, metanet = build_model(cfg)
    backbone.load_state({n[len("backbone."):]: v for n, v in state.items() if n.startswith("backbone.")})
    metanet.load_state({n[len("meta."):]: v for n, v in state.items() if n.startswith("meta.")})
    return cfg, backbone, metanet


def _fmt(x: float) -> str:
    return f"{x:.8e}"


def train(cfg: TrainConfig, out_dir, train_samples: list[VolumeSample] | None = None) -> TrainResult:
    """Run one arm to completion; writes checkpoint and per-iteration logs."""
    os.makedirs(out_dir, exist_ok=True)
    if train_samples is None:
        train_samples = read_dataset(os.path.join(cfg.data_dir, "train.mgv"))
    if not train_samples:
        raise ConfigError("training dataset is empty")

    ss = np.random.SeedSequence(cfg.seed)
    streams = ss.spawn(6)
    init_rng = np.random.Generator(np.random.PCG64(streams[0]))
    rng_data = np.random.Generator(np.random.PCG64(streams[1]))
    rng_subset = np.random.Generator(np.random.PCG64(streams[2]))
    rng_flip = np.random.Generator(np.random.PCG64(streams[3]))
    rng_teacher = np.random.Generator(np.random.PCG64(streams[4]))
    rng_mask = np.random.Generator(np.random.PCG64(streams[5]))

    backbone = Backbone(cfg.backbone_config(), init_rng)
    metanet = MetaNetwork(cfg.modalities * cfg.classes, cfg.metanet_config(), init_rng)
    params = model_parameters(backbone, metanet)
    opt = Adam(params, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps,
               weight_decay=cfg.weight_decay, amsgrad=cfg.amsgrad)

    ccfg = cfg.consistency_config()
    policy = cfg.mask_policy()
    use_sl = cfg.arm in _SL_ARMS
    use_cr = cfg.arm in _CR_ARMS
    fpsld = cfg.arm == "fpsld"

    train_rows = ["iter,lr,l_seg,l_sl,l_cr,total"]
    meta_rows = ["iter,t1,t2,w_f,beta,alpha"]
    started = time.perf_counter()
    breakdown = LossBreakdown(0.0, 0.0, 0.0, 0.0)

    for epoch in range(cfg.epochs):
        lr = poly_lr(cfg.lr_init, epoch, cfg.epochs, cfg.poly_power)
        for it in range(cfg.iters_per_epoch):
            step = epoch * cfg.iters_per_epoch + it
            sample = train_samples[int(rng_data.integers(0, len(train_samples)))]
            sample = random_crop(sample, cfg.crop_size, rng_data)
            subset = sample_modality_subset(rng_subset)
            flips = tuple(bool(v) for v in rng_flip.random(3) < 0.5)

            if cfg.student_augment == "none":
                student_view = sample
            else:
                student_view = flip_sample(sample, flips)
                if cfg.student_augment == "strong":
                    plane = int(rng_flip.integers(0, 3))
                    angle = float(rng_flip.uniform(-10.0, 10.0))
                    student_view = rotate_sample(student_view, plane, angle)
                    scales = 1.0 + rng_flip.uniform(-0.1, 0.1, size=cfg.modalities)
                    shifts = rng_flip.uniform(-0.1, 0.1, size=cfg.modalities)
                    student_view = jitter_intensities(student_view, scales, shifts)

            with Tape() as tape:
                out = backbone.forward(student_view.modalities, subset)
                l_seg = seg_loss(out.fused, out.logits, subset,
                                 student_view.labels, cfg.seg_supervision)
                l_sl_t = None
                l_cr_t = None
                mp: MetaParams | None = None
                if use_sl:
                    s_meta, mp = meta_amf(out.logits, subset, metanet, cfg.metanet_config(),
                                          fpsld=fpsld, use_temperatures=cfg.use_meta_temperatures)
                    mask_seed = int(rng_mask.integers(0, 2 ** 63))
                    mrng = np.random.Generator(np.random.PCG64(mask_seed))
                    vmask = gen_mask(s_meta, mp.w_f.item(), policy, mrng, seed=mask_seed)
                    l_sl_t = soft_label_loss(out.logits, subset, s_meta, vmask,
                                             cfg.tau, cfg.distill_direction)
                if use_cr:
                    y_t = teacher_forward(backbone, sample, ccfg, rng_teacher, flips=flips)
                    l_cr_t = consistency_loss(out.fused, y_t, cfg.tau)
                loss = total_loss(l_seg, l_sl_t, l_cr_t, cfg)
                breakdown = LossBreakdown(
                    l_seg=l_seg.item(),
                    l_sl=l_sl_t.item() if l_sl_t is not None else 0.0,
                    l_cr=l_cr_t.item() if l_cr_t is not None else 0.0,
                    total=loss.item(),
                )
                if not np.isfinite(breakdown.total):
                    detail = mp.as_floats() if mp is not None else {}
                    raise TrainingDivergedError(
                        f"non-finite loss at iteration {step}: {breakdown} meta={detail}")
                grads = tape.backward(loss)

            opt.step({n: tape.grad(p) for n, p in params.items()}, lr)
            train_rows.append(
                f"{step},{_fmt(lr)},{_fmt(breakdown.l_seg)},{_fmt(breakdown.l_sl)},"
                f"{_fmt(breakdown.l_cr)},{_fmt(breakdown.total)}")
            if mp is not None:
                f = mp.as_floats()
                meta_rows.append(
                    f"{step},{_fmt(f['t1'])},{_fmt(f['t2'])},{_fmt(f['w_f'])},"
                    f"{_fmt(f['beta'])},{_fmt(f['alpha'])}")

    wall = time.perf_counter() - started
    ckpt = os.path.join(out_dir, "checkpoint.mgc")
    save_checkpoint(ckpt, config_to_dict(cfg), params)
    train_log = os.path.join(out_dir, "train_log.csv")
    with open(train_log, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(train_rows) + "\n")
    meta_log = None
    if use_sl:
        meta_log = os.path.join(out_dir, "meta_params.csv")
        with open(meta_log, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(meta_rows) + "\n")
    return TrainResult(checkpoint=ckpt, train_log=train_log, meta_log=meta_log,
                       final=breakdown, wall_seconds=wall)
