"""Minimal volumetric backbone: one encoder per modality, one shared decoder.

Each encoder level applies two conv-relu blocks; levels are joined by
stride-2 downsampling convs.  The decoder mirrors the encoder with
nearest-neighbour upsampling, conv-relu, and skip concatenation, and is
applied with the same parameters to every modality's features.  A gated
average of per-modality logits stands in as the fusion head; absent
modalities are zero-filled before encoding and excluded from fusion.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import ops
from .tensor import Tensor, ShapeError

MODALITY_NAMES = ("flair", "t1ce", "t1", "t2")

CHECKPOINT_MAGIC = b"MGC1"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    modalities: int = 4
    classes: int = 4
    base_channels: int = 8
    depth: int = 3
    input_extent: int = 32

    def __post_init__(self):
        if self.classes < 2 or self.modalities < 1:
            raise ValueError(f"need classes >= 2 and modalities >= 1, got {self.classes}, {self.modalities}")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.input_extent % (2 ** (self.depth - 1)) != 0:
            raise ValueError(
                f"input extent {self.input_extent} not divisible by 2^{self.depth - 1}"
            )

    def level_channels(self, level: int) -> int:
        return self.base_channels * (2 ** level)


@dataclass
class ForwardOutputs:
    """Per-modality logits/probabilities plus the fused prediction."""

    logits: list        # M tensors [C, D, H, W], absent ones from zeroed input
    probs: list         # softmax of each logits tensor over the class axis
    fused: Tensor       # gated average over present modalities
    present: tuple      # sorted indices of present modalities


def _kaiming_conv(rng: np.random.Generator, cout: int, cin: int, dtype) -> np.ndarray:
    std = np.sqrt(2.0 / (cin * 27))
    return (rng.standard_normal((cout, cin, 3, 3, 3)) * std).astype(dtype)


class Backbone:
    """Holds parameters and the forward graph; one instance per training run."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self._build(rng)

    def _add_param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True)

    def _add_conv(self, name: str, cin: int, cout: int, rng: np.random.Generator) -> None:
        self._add_param(f"{name}.w", _kaiming_conv(rng, cout, cin, self.dtype))
        self._add_param(f"{name}.b", np.zeros(cout, dtype=self.dtype))

    def _build(self, rng: np.random.Generator) -> None:
        cfg = self.cfg
        for m in range(cfg.modalities):
            cin = 1
            for lvl in range(cfg.depth):
                ch = cfg.level_channels(lvl)
                self._add_conv(f"enc{m}.lvl{lvl}.conv0", cin, ch, rng)
                self._add_conv(f"enc{m}.lvl{lvl}.conv1", ch, ch, rng)
                if lvl + 1 < cfg.depth:
                    self._add_conv(f"enc{m}.down{lvl}", ch, cfg.level_channels(lvl + 1), rng)
                cin = cfg.level_channels(lvl + 1)
        for lvl in range(cfg.depth - 2, -1, -1):
            hi = cfg.level_channels(lvl + 1)
            lo = cfg.level_channels(lvl)
            self._add_conv(f"dec.up{lvl}.conv0", hi, lo, rng)
            self._add_conv(f"dec.up{lvl}.conv1", 2 * lo, lo, rng)
        self._add_conv("dec.head", cfg.base_channels, cfg.classes, rng)
        # gates start at softplus^-1(1) so fusion begins as a plain mean
        for m in range(cfg.modalities):
            self._add_param(f"fuse.gate{m}", np.full(1, np.log(np.e - 1.0), dtype=self.dtype))

    # -- parameter bookkeeping -----------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def encoder_parameter_count(self) -> int:
        return sum(p.size for n, p in self.params.items() if n.startswith("enc0."))

    def decoder_parameter_count(self) -> int:
        return sum(p.size for n, p in self.params.items() if n.startswith("dec."))

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise CheckpointError(f"parameter names mismatch: missing={sorted(missing)}, extra={sorted(extra)}")
        for name, value in state.items():
            if tuple(value.shape) != self.params[name].shape:
                raise CheckpointError(f"shape mismatch for {name}: {value.shape} vs {self.params[name].shape}")
            self.params[name] = Tensor(value.astype(self.dtype), requires_grad=True)

    # -- forward graph ---------------------------------------------------

    def _conv_block(self, x: Tensor, name: str, stride: int = 1, activate: bool = True) -> Tensor:
        out = ops.conv3d(x, self.params[f"{name}.w"], self.params[f"{name}.b"], stride=stride)
        return ops.relu(out) if activate else out

    def encode_modality(self, volume: Tensor, modality: int) -> list[Tensor]:
        """Feature pyramid for one modality; level k halves the extent k times."""
        cfg = self.cfg
        if modality >= cfg.modalities:
            raise ShapeError(f"modality index {modality} out of range {cfg.modalities}")
        if volume.shape != (1, cfg.input_extent, cfg.input_extent, cfg.input_extent):
            raise ShapeError(
                f"expected volume [1,{cfg.input_extent}^3], got {volume.shape}"
            )
        feats = []
        x = volume
        for lvl in range(cfg.depth):
            x = self._conv_block(x, f"enc{modality}.lvl{lvl}.conv0")
            x = self._conv_block(x, f"enc{modality}.lvl{lvl}.conv1")
            feats.append(x)
            if lvl + 1 < cfg.depth:
                x = self._conv_block(x, f"enc{modality}.down{lvl}", stride=2)
        return feats

    def _decode_one(self, feats: list[Tensor]) -> Tensor:
        cfg = self.cfg
        if len(feats) != cfg.depth:
            raise ShapeError(f"expected {cfg.depth} feature levels, got {len(feats)}")
        x = feats[-1]
        for lvl in range(cfg.depth - 2, -1, -1):
            x = ops.transposed_upsample3d(x, factor=2)
            x = self._conv_block(x, f"dec.up{lvl}.conv0")
            x = ops.concat([x, feats[lvl]], axis=0)
            x = self._conv_block(x, f"dec.up{lvl}.conv1")
        return self._conv_block(x, "dec.head", activate=False)

    def decode_shared(self, features: list[list[Tensor]]) -> list[Tensor]:
        """Apply the one shared decoder to each modality's feature pyramid."""
        return [self._decode_one(f) for f in features]

    def baseline_fuse(self, logits: list[Tensor], present: Iterable[int]) -> Tensor:
        """Softplus-gated average of the present modalities' logits."""
        idx = sorted(set(present))
        if not idx:
            raise ShapeError("baseline_fuse: empty modality set")
        gates = [ops.softplus(self.params[f"fuse.gate{m}"]) for m in idx]
        num = ops.mul(logits[idx[0]], gates[0])
        den = gates[0]
        for g, m in zip(gates[1:], idx[1:]):
            num = ops.add(num, ops.mul(logits[m], g))
            den = ops.add(den, g)
        return ops.mul(num, ops.reciprocal(den))

    def forward(self, volumes: np.ndarray, present: Iterable[int]) -> ForwardOutputs:
        """Full pass: zero-fill absent modalities, encode all, decode, fuse."""
        cfg = self.cfg
        idx = tuple(sorted(set(present)))
        if not idx:
            raise ShapeError("forward: empty modality set")
        if volumes.shape[0] != cfg.modalities:
            raise ShapeError(f"expected {cfg.modalities} modality volumes, got {volumes.shape[0]}")
        feats = []
        for m in range(cfg.modalities):
            if m in idx:
                vol = np.ascontiguousarray(volumes[m][None], dtype=self.dtype)
            else:
                vol = np.zeros((1,) + volumes.shape[1:], dtype=self.dtype)
            feats.append(self.encode_modality(Tensor(vol), m))
        logits = self.decode_shared(feats)
        probs = [ops.softmax(l, axis=0) for l in logits]
        fused = self.baseline_fuse(logits, idx)
        return ForwardOutputs(logits=logits, probs=probs, fused=fused, present=idx)

    def forward_fused(self, volumes: np.ndarray, present: Iterable[int]) -> Tensor:
        """Fused logits only; skips absent branches, which never enter fusion."""
        cfg = self.cfg
        idx = tuple(sorted(set(present)))
        if not idx:
            raise ShapeError("forward_fused: empty modality set")
        logits: list = [None] * cfg.modalities
        for m in idx:
            vol = np.ascontiguousarray(volumes[m][None], dtype=self.dtype)
            logits[m] = self._decode_one(self.encode_modality(Tensor(vol), m))
        return self.baseline_fuse(logits, idx)


# ---------------------------------------------------------------------------
# checkpoint format: magic, version u32, config JSON block, then named f32
# tensors (name length u32, UTF-8 name, rank u32, dims u32 x rank, data).
# All integers little-endian.

def save_checkpoint(path, config: dict, params: dict[str, Tensor]) -> None:
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name, tensor in params.items():
            nb = name.encode("utf-8")
            arr = np.ascontiguousarray(tensor.data, dtype="<f4")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise CheckpointError(f"truncated checkpoint: {what} at byte {off}")
        chunk = raw[off:off + n]
        off += n
        return chunk

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic at byte 0")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (blob_len,) = struct.unpack("<I", take(4, "config length"))
    config = json.loads(take(blob_len, "config block").decode("utf-8"))
    params: dict[str, np.ndarray] = {}
    while off < len(raw):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(4 * count, f"data for {name}"), dtype="<f4")
        params[name] = data.reshape(dims).copy()
    return config, params
