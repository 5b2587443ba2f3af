"""Region mapping, Dice overlap, and the 15-combination evaluation table."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import CLASS_ED, CLASS_ET, CLASS_NCR, MODALITY_NAMES, VolumeSample
from .tensor import no_grad

REGION_NAMES = ("WT", "TC", "ET")

# the fifteen nonempty modality subsets, in the conventional reporting order:
# singles, pairs, triples, then the full set (flair, t1ce, t1, t2 indexing)
COMBOS: tuple[tuple[int, ...], ...] = (
    (0,), (1,), (2,), (3,),
    (0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3),
    (0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3),
    (0, 1, 2, 3),
)


def combo_name(combo: tuple[int, ...]) -> str:
    return "+".join(MODALITY_NAMES[m] for m in combo)


def region_masks(labels: np.ndarray) -> dict[str, np.ndarray]:
    """WT = all lesion classes, TC = necrotic + enhancing, ET = enhancing."""
    if labels.max(initial=0) > 3 or labels.min(initial=0) < 0:
        raise ValueError(f"class ids outside {{0..3}}: found {labels.min()}..{labels.max()}")
    return {
        "WT": np.isin(labels, (CLASS_NCR, CLASS_ED, CLASS_ET)),
        "TC": np.isin(labels, (CLASS_NCR, CLASS_ET)),
        "ET": labels == CLASS_ET,
    }


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|A n B| / (|A| + |B|); both-empty counts as a perfect 1.0."""
    if pred.shape != gt.shape:
        raise ValueError(f"dice: shapes differ, {pred.shape} vs {gt.shape}")
    pred = pred.astype(bool)
    gt = gt.astype(bool)
    denom = int(pred.sum()) + int(gt.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / denom


@dataclass
class EvalRow:
    combo: tuple[int, ...]
    dice_wt: float
    dice_tc: float
    dice_et: float


@dataclass
class EvalTable:
    rows: list[EvalRow]
    avg: tuple[float, float, float]

    @classmethod
    def from_rows(cls, rows: list[EvalRow]) -> "EvalTable":
        n = len(rows)
        avg = (
            sum(r.dice_wt for r in rows) / n,
            sum(r.dice_tc for r in rows) / n,
            sum(r.dice_et for r in rows) / n,
        )
        return cls(rows=rows, avg=avg)

    def region_average(self) -> float:
        return sum(self.avg) / 3.0

    def row_for(self, combo: tuple[int, ...]) -> EvalRow:
        for r in self.rows:
            if r.combo == combo:
                return r
        raise KeyError(f"no row for combo {combo}")

    def to_csv(self, path) -> None:
        lines = ["combo,flair,t1ce,t1,t2,dice_wt,dice_tc,dice_et"]
        for r in self.rows:
            flags = ",".join("1" if m in r.combo else "0" for m in range(4))
            lines.append(
                f"{combo_name(r.combo)},{flags},"
                f"{100 * r.dice_wt:.2f},{100 * r.dice_tc:.2f},{100 * r.dice_et:.2f}"
            )
        lines.append(
            f"AVG,,,,,{100 * self.avg[0]:.2f},{100 * self.avg[1]:.2f},{100 * self.avg[2]:.2f}"
        )
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")


def predict_labels(model, volumes: np.ndarray, present: tuple[int, ...]) -> np.ndarray:
    """Argmax class map of the fused logits; eval path, no augmentation."""
    with no_grad():
        fused = model.forward_fused(volumes, present)
    return np.argmax(fused.data, axis=0).astype(np.uint8)


def _worker_count() -> int:
    env = os.environ.get("MGML_THREADS", "").strip()
    if env:
        return max(1, int(env))
    return 1


def evaluate_combinations(model, samples: list[VolumeSample], max_workers: int | None = None) -> EvalTable:
    """Dice per region for every modality subset, averaged over subjects.

    Work items are gathered into a preallocated array and reduced in fixed
    order, so results are identical whether or not workers run in parallel.
    """
    if not samples:
        raise ValueError("evaluate_combinations: empty dataset")
    workers = max_workers if max_workers is not None else _worker_count()
    scores = np.zeros((len(COMBOS), len(samples), 3), dtype=np.float64)

    def one(ci: int, si: int) -> None:
        sample = samples[si]
        pred = predict_labels(model, sample.modalities, COMBOS[ci])
        pm = region_masks(pred)
        gm = region_masks(sample.labels)
        for ri, region in enumerate(REGION_NAMES):
            scores[ci, si, ri] = dice(pm[region], gm[region])

    jobs = [(ci, si) for ci in range(len(COMBOS)) for si in range(len(samples))]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda job: one(*job), jobs))
    else:
        for job in jobs:
            one(*job)

    rows = []
    for ci, combo in enumerate(COMBOS):
        per_region = scores[ci].mean(axis=0)
        rows.append(EvalRow(combo=combo, dice_wt=float(per_region[0]),
                            dice_tc=float(per_region[1]), dice_et=float(per_region[2])))
    return EvalTable.from_rows(rows)


# --- slice export (portable graymap / pixmap) --------------------------------

_CLASS_COLOURS = np.array(
    [[0, 0, 0], [60, 80, 255], [0, 200, 0], [255, 50, 50]], dtype=np.uint8
)  # BG black, NCR blue, ED green, ET red


def write_pgm(path, image: np.ndarray) -> None:
    img = np.clip(image / 1.2, 0.0, 1.0)
    data = (img * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def write_ppm(path, labels: np.ndarray) -> None:
    rgb = _CLASS_COLOURS[labels]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{labels.shape[1]} {labels.shape[0]}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def export_slices(out_dir, model, samples: list[VolumeSample], max_subjects: int = 3) -> list[str]:
    """Dump mid-axial slices: each modality, ground truth, one prediction per combo."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for si, sample in enumerate(samples[:max_subjects]):
        sub = os.path.join(out_dir, f"subject_{si:03d}")
        os.makedirs(sub, exist_ok=True)
        mid = sample.labels.shape[0] // 2
        for m, name in enumerate(MODALITY_NAMES):
            p = os.path.join(sub, f"mod_{name}.pgm")
            write_pgm(p, sample.modalities[m, mid])
            written.append(p)
        p = os.path.join(sub, "gt.ppm")
        write_ppm(p, sample.labels[mid])
        written.append(p)
        for combo in COMBOS:
            pred = predict_labels(model, sample.modalities, combo)
            p = os.path.join(sub, f"pred_{combo_name(combo)}.ppm")
            write_ppm(p, pred[mid])
            written.append(p)
    return written
