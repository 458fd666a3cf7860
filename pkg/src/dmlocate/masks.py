"""Per-class occurrence masks built from high-confidence activation maps.

Symmetric classes sum each map with its horizontal flip before normalizing,
so the built mask is exactly flip-invariant; the designated asymmetric class
keeps its one-sided statistics. A hand-drawn anatomical-region baseline
(pseudo masks) shares the same storage format.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops, synth
from .cam import ActivationMap, class_activation_map
from .classifier import ClassifierNet, predict_scores
from .corpus import ClassSpec, Sample
from .dmt import load_dmt, save_dmt
from .errors import CorruptArtifactError, MaskBuildError
from .utils import hash_file, read_json, write_json


@dataclass
class MaskBuildConfig:
    score_threshold: float = 0.8
    tau: float = 0.5
    asymmetric_class_ids: frozenset[int] = frozenset({0})
    mode: str = "soft"  # "soft" | "binary"

    def __post_init__(self) -> None:
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must be in (0,1), got {self.tau}")
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ValueError(f"score threshold must be in [0,1], got {self.score_threshold}")
        if self.mode not in ("soft", "binary"):
            raise ValueError(f"mode must be soft or binary, got {self.mode}")


@dataclass
class DiseaseMask:
    class_id: int
    mask: np.ndarray  # (p, p) in [0, 1]
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.mask = np.asarray(self.mask, dtype=np.float32)
        if self.mask.min() < 0.0 or self.mask.max() > 1.0:
            raise ValueError(f"mask values out of [0,1]: {self.mask.min()}..{self.mask.max()}")


def collect_high_quality(
    net: ClassifierNet,
    samples: list[Sample],
    class_id: int,
    score_threshold: float = 0.8,
) -> list[ActivationMap]:
    """Activation maps of positive-labeled samples scoring at or above the cut."""
    positives = [s for s in samples if s.labels[class_id] == 1]
    if positives:
        images = np.stack([s.image for s in positives])
        scores = predict_scores(net, images)[:, class_id]
    else:
        scores = np.zeros(0)
    keep = [s for s, sc in zip(positives, scores) if sc >= score_threshold]
    if not keep:
        raise MaskBuildError(
            f"no positive sample of class {class_id} scored >= {score_threshold}; "
            "relax the score threshold"
        )
    return [class_activation_map(net, s.image, class_id, s.index) for s in keep]


def build_mask(
    maps: list[ActivationMap], class_id: int, config: MaskBuildConfig
) -> DiseaseMask:
    """Average the normalized (optionally flip-symmetrized) maps and threshold."""
    if not maps:
        raise MaskBuildError(f"cannot build a mask for class {class_id} from zero maps")
    if any(m.class_id != class_id for m in maps):
        raise ValueError("all maps must belong to the target class")
    symmetric = class_id not in config.asymmetric_class_ids
    acc = np.zeros_like(maps[0].map, dtype=np.float64)
    for amap in maps:
        m = amap.map.astype(np.float64)
        if symmetric:
            m = ops.hflip(m) + m
        acc += ops.minmax_normalize(m).value
    mean = acc / len(maps)
    if config.mode == "binary":
        mask = (mean >= config.tau).astype(np.float32)
    else:
        mask = np.where(mean >= config.tau, mean, 0.0).astype(np.float32)
    np.clip(mask, 0.0, 1.0, out=mask)  # safety net; the normalized mean already fits
    return DiseaseMask(
        class_id=class_id,
        mask=mask,
        meta={
            "n_maps": len(maps),
            "score_threshold": config.score_threshold,
            "tau": config.tau,
            "mode": config.mode,
            "symmetrized": symmetric,
        },
    )


def build_pseudo_masks(taxonomy: list[ClassSpec], p: int) -> list[DiseaseMask]:
    """Binary anatomical-region masks: cardiac ellipse for the asymmetric class,
    both lung fields for every symmetric class."""
    cx, cy, rx, ry = synth.CARDIAC_ELLIPSE
    cardiac = _raster_ellipse(p, cx, cy, rx, ry)
    lcy, lrx, lry = synth.LUNG_ELLIPSE
    lung = _raster_ellipse(p, 0.5 - synth.LUNG_OFFSET, lcy, lrx, lry)
    lungs = np.maximum(lung, ops.hflip(lung))  # exact mirror by construction
    out = []
    for spec in taxonomy:
        region = lungs if spec.symmetric else cardiac
        out.append(
            DiseaseMask(
                class_id=spec.class_id,
                mask=region.astype(np.float32),
                meta={"n_maps": 1, "mode": "pseudo", "symmetrized": spec.symmetric},
            )
        )
    return out


def _raster_ellipse(p: int, cx: float, cy: float, rx: float, ry: float) -> np.ndarray:
    coords = (np.arange(p) + 0.5) / p
    dx = (coords[None, :] - cx) / rx
    dy = (coords[:, None] - cy) / ry
    return (dx * dx + dy * dy <= 1.0).astype(np.float32)


def mask_stack(masks: list[DiseaseMask]) -> np.ndarray:
    """(K, p, p) array ordered by class id; demands a complete set."""
    by_id = {m.class_id: m for m in masks}
    missing = [c for c in range(len(masks)) if c not in by_id]
    if missing:
        raise MaskBuildError(f"mask set missing classes {missing}")
    return np.stack([by_id[c].mask for c in range(len(masks))])


def save_masks(masks: list[DiseaseMask], out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    per_class = {}
    for m in masks:
        path = out / f"{m.class_id}.dmt"
        save_dmt(path, m.mask)
        per_class[str(m.class_id)] = {"meta": m.meta, "sha256": hash_file(path)}
    write_json(out / "meta.json", {"classes": per_class})
    return out


def load_masks(mask_dir: str | Path) -> list[DiseaseMask]:
    root = Path(mask_dir)
    meta = read_json(root / "meta.json")
    out = []
    for cid_str, entry in sorted(meta["classes"].items(), key=lambda kv: int(kv[0])):
        path = root / f"{cid_str}.dmt"
        if not path.exists():
            raise MaskBuildError(f"mask file for class {cid_str} is missing at {path}")
        if hash_file(path) != entry["sha256"]:
            raise CorruptArtifactError(f"mask tensor {path} does not match its recorded hash")
        out.append(DiseaseMask(class_id=int(cid_str), mask=load_dmt(path), meta=entry["meta"]))
    return out
