"""Localization and classification metrics.

Boxes are (x, y, w, h) in continuous pixel coordinates. A ground-truth box
with no surviving prediction counts as a miss. AUC follows the Mann-Whitney
statistic with half credit for ties, computed with integer pair counts so it
matches a brute-force pairwise oracle bit for bit.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import ops


@dataclass(frozen=True)
class BBox:
    x: float
    y: float
    w: float
    h: float
    class_id: int = -1

    def __post_init__(self) -> None:
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box extents must be positive, got w={self.w}, h={self.h}")

    def as_list(self) -> list[float]:
        return [float(self.x), float(self.y), float(self.w), float(self.h)]


@dataclass
class LocalizationRecord:
    sample_id: int
    class_id: int
    predicted: BBox | None
    ground_truth: BBox
    iou: float

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "class_id": self.class_id,
            "predicted": self.predicted.as_list() if self.predicted else None,
            "ground_truth": self.ground_truth.as_list(),
            "iou": float(self.iou),
        }

    @staticmethod
    def from_dict(d: dict) -> "LocalizationRecord":
        pred = d.get("predicted")
        return LocalizationRecord(
            sample_id=int(d["sample_id"]),
            class_id=int(d["class_id"]),
            predicted=BBox(*pred, class_id=int(d["class_id"])) if pred else None,
            ground_truth=BBox(*d["ground_truth"], class_id=int(d["class_id"])),
            iou=float(d["iou"]),
        )


def iou(a: BBox, b: BBox) -> float:
    ix = max(0.0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0.0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def cam_to_bbox(
    amap: np.ndarray, class_id: int, image_size: int, binarize_fraction: float = 0.5,
    grid_stride: int | None = None,
) -> BBox | None:
    """Normalize, upscale, binarize at a fraction of the max, and box the
    largest 4-connected component. Returns None when nothing survives.

    The activation grid samples the image at one cell per ``grid_stride``
    pixels (a strided conv stack centers cell i at i*stride), so component
    coordinates from the align-corners upscale are mapped back onto that
    stride before boxing; grid_stride defaults to image_size // p."""
    if not 0.0 < binarize_fraction < 1.0:
        raise ValueError(f"binarize fraction must be in (0,1), got {binarize_fraction}")
    amap = np.asarray(amap, dtype=np.float32)
    p = amap.shape[-1]
    normed = ops.minmax_normalize(amap).value
    if normed.max() == 0.0:
        return None
    up = ops.bilinear_resample(normed[None], image_size, image_size).value[0]
    binary = up >= binarize_fraction * up.max()
    if not binary.any():
        return None
    labeled, count = ndimage.label(binary, structure=[[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    sizes = ndimage.sum_labels(np.ones_like(labeled), labeled, index=range(1, count + 1))
    best = int(np.argmax(sizes)) + 1
    rows, cols = np.nonzero(labeled == best)
    stride = grid_stride if grid_stride else max(1, image_size // p)
    scale = (p - 1) * stride / (image_size - 1) if image_size > 1 and p > 1 else 1.0
    return BBox(
        x=float(cols.min()) * scale,
        y=float(rows.min()) * scale,
        w=float(cols.max() - cols.min() + 1) * scale,
        h=float(rows.max() - rows.min() + 1) * scale,
        class_id=class_id,
    )


def accuracy_at_iou(
    records: list[LocalizationRecord],
    thresholds: list[float],
    num_classes: int,
) -> dict:
    """Per-class and unweighted-mean hit rates at each IoU threshold.

    Classes with no records are reported as None and excluded from the mean
    (with a warning), mirroring how absent pathology rows are dropped."""
    for t in thresholds:
        if not 0.0 < t < 1.0:
            raise ValueError(f"IoU threshold must be in (0,1), got {t}")
    by_class: dict[int, list[LocalizationRecord]] = {c: [] for c in range(num_classes)}
    for rec in records:
        by_class[rec.class_id].append(rec)
    empty = [c for c, rows in by_class.items() if not rows]
    if empty:
        warnings.warn(f"no localization records for classes {empty}; excluded from mean")
    out: dict = {}
    for t in thresholds:
        per_class: list[float | None] = []
        for c in range(num_classes):
            rows = by_class[c]
            if not rows:
                per_class.append(None)
                continue
            hits = sum(1 for r in rows if r.predicted is not None and r.iou >= t)
            per_class.append(hits / len(rows))
        present = [v for v in per_class if v is not None]
        out[f"{t:g}"] = {
            "per_class": per_class,
            "mean": float(np.mean(present)) if present else None,
        }
    return out


def format_accuracy_row(per_class: list[float | None], mean: float | None) -> str:
    cells = " ".join("n/a " if v is None else f"{v:.2f}" for v in per_class).rstrip()
    mean_cell = "n/a" if mean is None else f"{mean:.2f}"
    return f"{cells} | {mean_cell}"


def format_accuracy_table(acc: dict, class_names: list[str], label: str = "") -> str:
    header_cells = " ".join(f"{(n[:3].capitalize() + '.'): <4}"[:4] for n in class_names)
    lines = [f"T(IoU) {'Model ' + label} {header_cells} | Mean".rstrip()]
    for thr, block in acc.items():
        lines.append(f"{thr:<6} {label} {format_accuracy_row(block['per_class'], block['mean'])}")
    return "\n".join(lines)


def roc_auc(scores: list[float], labels: list[int]) -> float:
    """Probability a positive outscores a negative, half credit for ties."""
    if len(scores) != len(labels):
        raise ValueError("scores and labels must pair up")
    n_pos = sum(1 for y in labels if y)
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative label")
    order = sorted(range(len(scores)), key=lambda i: scores[i])
    wins = 0  # positive strictly above a negative
    ties = 0
    neg_below = 0
    i = 0
    while i < len(order):
        j = i
        group_pos = 0
        group_neg = 0
        while j < len(order) and scores[order[j]] == scores[order[i]]:
            if labels[order[j]]:
                group_pos += 1
            else:
                group_neg += 1
            j += 1
        wins += group_pos * neg_below
        ties += group_pos * group_neg
        neg_below += group_neg
        i = j
    return (wins + 0.5 * ties) / (n_pos * n_neg)


def save_records(records: list[LocalizationRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(r.to_dict(), sort_keys=True) for r in records]
    path.write_text("\n".join(lines) + ("\n" if lines else ""))


def load_records(path: str | Path) -> list[LocalizationRecord]:
    return [
        LocalizationRecord.from_dict(json.loads(line))
        for line in Path(path).read_text().splitlines()
    ]
