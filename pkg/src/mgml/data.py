"""Seeded synthetic multi-modal volumes with nested lesion geometry.

Each sample carries four co-registered intensity volumes (flair, t1ce, t1,
t2) and a voxel class map over {background, necrotic core, edema, enhancing
core}.  Lesions are triples of concentric ellipsoids: the outer shell is
edema, the middle shell necrotic tissue, the core enhancing tissue, so the
whole-tumor / tumor-core / enhancing-core region nesting holds by
construction.  The per-modality contrast table mirrors the clinical
sensitivities: the enhancing core is brightest in t1ce, edema is brightest
in t2 and flair, and t1 carries little lesion contrast.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

CLASS_BG, CLASS_NCR, CLASS_ED, CLASS_ET = 0, 1, 2, 3
N_CLASSES = 4
MODALITY_NAMES = ("flair", "t1ce", "t1", "t2")
AUG_LEVELS = ("none", "weak", "strong")

DATASET_MAGIC = b"MGV1"
DATASET_VERSION = 1

# rows: class (BG, NCR, ED, ET); columns: modality (flair, t1ce, t1, t2)
DEFAULT_CONTRAST = np.array(
    [
        [0.20, 0.20, 0.20, 0.20],
        [0.52, 0.30, 0.30, 0.58],
        [0.90, 0.35, 0.26, 0.85],
        [0.50, 0.95, 0.30, 0.55],
    ],
    dtype=np.float32,
)


class DatasetFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class VolumeSample:
    modalities: np.ndarray  # [M, D, H, W] float32
    labels: np.ndarray      # [D, H, W] uint8
    sample_seed: int


@dataclass(frozen=True)
class SynthConfig:
    extent: int = 32
    lesion_count: tuple[int, int] = (1, 3)
    wt_radius: tuple[float, float] = (5.0, 9.0)
    tc_fraction: tuple[float, float] = (0.55, 0.75)
    et_fraction: tuple[float, float] = (0.45, 0.70)
    contrast: np.ndarray = field(default_factory=lambda: DEFAULT_CONTRAST.copy())
    noise_sigma: float = 0.05

    def __post_init__(self):
        if self.lesion_count[0] < 1 or self.lesion_count[0] > self.lesion_count[1]:
            raise ValueError(f"bad lesion count range {self.lesion_count}")
        if self.wt_radius[0] <= 0 or self.wt_radius[0] > self.wt_radius[1]:
            raise ValueError(f"bad radius range {self.wt_radius}")
        for nm in ("tc_fraction", "et_fraction"):
            lo, hi = getattr(self, nm)
            if not (0.0 < lo <= hi < 1.0):
                raise ValueError(f"{nm} must keep inner radii strictly smaller, got ({lo}, {hi})")
        if 2 * self.wt_radius[1] + 2 >= self.extent:
            raise ValueError(
                f"max radius {self.wt_radius[1]} cannot fit inside extent {self.extent}"
            )
        ct = np.asarray(self.contrast, dtype=np.float32)
        if ct.shape != (N_CLASSES, len(MODALITY_NAMES)):
            raise ValueError(f"contrast table must be {N_CLASSES}x{len(MODALITY_NAMES)}, got {ct.shape}")
        t1ce = MODALITY_NAMES.index("t1ce")
        if ct[CLASS_ET, t1ce] != ct[:, t1ce].max():
            raise ValueError("contrast table: enhancing core must be brightest in t1ce")
        for name in ("t2", "flair"):
            col = MODALITY_NAMES.index(name)
            if ct[CLASS_ED, col] != ct[:, col].max():
                raise ValueError(f"contrast table: edema must be brightest in {name}")
        t1 = MODALITY_NAMES.index("t1")
        if ct[:, t1].max() - ct[:, t1].min() > 0.25:
            raise ValueError("contrast table: t1 column must be low-contrast")


def _ellipsoid(extent: int, center: np.ndarray, radii: np.ndarray) -> np.ndarray:
    grid = np.arange(extent, dtype=np.float64)
    dx = (grid[:, None, None] - center[0]) / radii[0]
    dy = (grid[None, :, None] - center[1]) / radii[1]
    dz = (grid[None, None, :] - center[2]) / radii[2]
    return dx * dx + dy * dy + dz * dz <= 1.0


def generate_volume(cfg: SynthConfig, sample_seed: int) -> VolumeSample:
    """Deterministic sample from (cfg, seed): nested lesions plus noise."""
    rng = np.random.Generator(np.random.PCG64(sample_seed))
    extent = cfg.extent
    labels = np.zeros((extent,) * 3, dtype=np.uint8)
    n_lesions = int(rng.integers(cfg.lesion_count[0], cfg.lesion_count[1] + 1))
    for _ in range(n_lesions):
        wt = rng.uniform(cfg.wt_radius[0], cfg.wt_radius[1], size=3)
        rmax = float(wt.max())
        if rmax + 1 >= extent - 1 - rmax:
            raise ValueError(f"radius {rmax} exceeds extent {extent}")
        center = rng.uniform(rmax + 1, extent - 1 - rmax, size=3)
        tc = wt * rng.uniform(*cfg.tc_fraction)
        et = tc * rng.uniform(*cfg.et_fraction)
        labels[_ellipsoid(extent, center, wt)] = CLASS_ED
        labels[_ellipsoid(extent, center, tc)] = CLASS_NCR
        labels[_ellipsoid(extent, center, et)] = CLASS_ET
    contrast = np.asarray(cfg.contrast, dtype=np.float32)
    vols = np.empty((len(MODALITY_NAMES), extent, extent, extent), dtype=np.float32)
    for m in range(len(MODALITY_NAMES)):
        base = contrast[labels, m]
        noise = rng.standard_normal(labels.shape).astype(np.float32) * np.float32(cfg.noise_sigma)
        vols[m] = base + noise
    return VolumeSample(modalities=vols, labels=labels, sample_seed=int(sample_seed))


# --- augmentation -----------------------------------------------------------

def flip_sample(sample: VolumeSample, axes: tuple[bool, bool, bool]) -> VolumeSample:
    vols, labels = sample.modalities, sample.labels
    for ax, do in enumerate(axes):
        if do:
            vols = np.flip(vols, axis=ax + 1)
            labels = np.flip(labels, axis=ax)
    return VolumeSample(np.ascontiguousarray(vols), np.ascontiguousarray(labels), sample.sample_seed)


_ROT_PLANES = ((0, 1), (0, 2), (1, 2))


def rotate_sample(sample: VolumeSample, plane: int, angle_deg: float) -> VolumeSample:
    """Rotate in one coordinate plane; labels resample nearest-neighbour."""
    a, b = _ROT_PLANES[plane]
    vols = np.stack([
        ndimage.rotate(v, angle_deg, axes=(a, b), reshape=False, order=1, mode="nearest")
        for v in sample.modalities
    ]).astype(np.float32)
    labels = ndimage.rotate(sample.labels, angle_deg, axes=(a, b), reshape=False,
                            order=0, mode="nearest")
    return VolumeSample(vols, np.ascontiguousarray(labels, dtype=np.uint8), sample.sample_seed)


def jitter_intensities(sample: VolumeSample, scales: np.ndarray, shifts: np.ndarray) -> VolumeSample:
    vols = (sample.modalities * scales[:, None, None, None].astype(np.float32)
            + shifts[:, None, None, None].astype(np.float32))
    return VolumeSample(vols.astype(np.float32), sample.labels, sample.sample_seed)


def augment(sample: VolumeSample, strength: str, rng: np.random.Generator) -> VolumeSample:
    """none: identity; weak: random flips; strong: flips, small rotation, jitter."""
    if strength not in AUG_LEVELS:
        raise ValueError(f"unknown augmentation level {strength!r}")
    if strength == "none":
        return sample
    flips = tuple(bool(v) for v in rng.random(3) < 0.5)
    out = flip_sample(sample, flips)
    if strength == "strong":
        plane = int(rng.integers(0, 3))
        angle = float(rng.uniform(-10.0, 10.0))
        out = rotate_sample(out, plane, angle)
        n = sample.modalities.shape[0]
        scales = 1.0 + rng.uniform(-0.1, 0.1, size=n)
        shifts = rng.uniform(-0.1, 0.1, size=n)
        out = jitter_intensities(out, scales, shifts)
    return out


def random_crop(sample: VolumeSample, size: int, rng: np.random.Generator) -> VolumeSample:
    extent = sample.labels.shape[0]
    if size > extent:
        raise ValueError(f"crop {size} larger than extent {extent}")
    if size == extent:
        return sample
    ofs = [int(rng.integers(0, extent - size + 1)) for _ in range(3)]
    sl = tuple(slice(o, o + size) for o in ofs)
    return VolumeSample(
        np.ascontiguousarray(sample.modalities[(slice(None),) + sl]),
        np.ascontiguousarray(sample.labels[sl]),
        sample.sample_seed,
    )


# --- dataset file format -----------------------------------------------------
# magic, version u32, M u32, C u32, D H W u32, count u32; per sample:
# seed u64, M*D*H*W f32 intensities (modality-major), D*H*W u8 labels.

def write_dataset(samples: list[VolumeSample], path) -> None:
    if not samples:
        raise ValueError("refusing to write an empty dataset")
    m, d, h, w = samples[0].modalities.shape
    for s in samples:
        if s.modalities.shape != (m, d, h, w) or s.labels.shape != (d, h, w):
            raise ValueError("all samples must share one extent and modality count")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<7I", DATASET_VERSION, m, N_CLASSES, d, h, w, len(samples)))
        for s in samples:
            fh.write(struct.pack("<Q", s.sample_seed))
            fh.write(np.ascontiguousarray(s.modalities, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(s.labels, dtype=np.uint8).tobytes())


def read_dataset(path) -> list[VolumeSample]:
    with open(path, "rb") as fh:
        raw = fh.read()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise DatasetFormatError(f"truncated dataset: {what}", off)
        chunk = raw[off:off + n]
        off += n
        return chunk

    if take(4, "magic") != DATASET_MAGIC:
        raise DatasetFormatError("bad dataset magic", 0)
    version, m, c, d, h, w, count = struct.unpack("<7I", take(28, "header"))
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}", 4)
    if c != N_CLASSES:
        raise DatasetFormatError(f"unsupported class count {c}", 12)
    samples = []
    voxels = d * h * w
    for _ in range(count):
        (seed,) = struct.unpack("<Q", take(8, "sample seed"))
        vols = np.frombuffer(take(4 * m * voxels, "intensities"), dtype="<f4")
        labels = np.frombuffer(take(voxels, "labels"), dtype=np.uint8)
        samples.append(VolumeSample(
            modalities=vols.reshape(m, d, h, w).copy(),
            labels=labels.reshape(d, h, w).copy(),
            sample_seed=int(seed),
        ))
    return samples
