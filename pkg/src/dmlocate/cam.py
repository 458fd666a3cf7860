"""Class activation maps and their attention-guided variant.

Maps are stored unnormalized; rescaling happens only downstream (mask
building, box extraction) so the linear identities against the classifier
head stay checkable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ops
from .classifier import ClassifierNet
from .corpus import Sample
from .dmt import save_dmt


@dataclass
class ActivationMap:
    class_id: int
    map: np.ndarray  # (p, p)
    source: str = "plain"  # "plain" | "attention"
    sample_id: int = -1


def _check_class(net: ClassifierNet, class_id: int) -> None:
    if not 0 <= class_id < net.arch.num_classes:
        raise ValueError(
            f"class id {class_id} out of range for {net.arch.num_classes} classes"
        )


def class_activation_map(net: ClassifierNet, image: np.ndarray, class_id: int,
                         sample_id: int = -1) -> ActivationMap:
    """Weight the final feature maps by the class head row and sum over channels."""
    _check_class(net, class_id)
    feats = net.features(image[None] if image.ndim == 3 else image)[0]
    cam = np.einsum("kij,k->ij", feats, net.head_w.value[class_id])
    return ActivationMap(class_id=class_id, map=cam.astype(np.float32),
                         source="plain", sample_id=sample_id)


def class_probability(amap: ActivationMap, bias: float) -> float:
    """Sigmoid of the map mean plus the class bias."""
    mean = float(np.asarray(amap.map, dtype=np.float64).mean())
    return float(ops.sigmoid(np.asarray(mean + bias)).value)


def fuse_attention(features: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Skip-connected spatial modulation: mask * features + features."""
    feats = np.asarray(features)
    m = np.asarray(mask, dtype=feats.dtype)
    if feats.ndim != 3 or m.shape != feats.shape[1:]:
        raise ValueError(
            f"mask {m.shape} must match the feature grid {feats.shape[1:]} of (C',p,p) features"
        )
    if m.min() < 0.0 or m.max() > 1.0:
        raise ValueError("mask values must lie in [0,1]")
    return m[None] * feats + feats


def attention_cam(net: ClassifierNet, image: np.ndarray, class_id: int,
                  mask: np.ndarray, sample_id: int = -1) -> ActivationMap:
    """Class activation map over mask-fused features."""
    _check_class(net, class_id)
    feats = net.features(image[None] if image.ndim == 3 else image)[0]
    fused = fuse_attention(feats, mask)
    cam = np.einsum("kij,k->ij", fused, net.head_w.value[class_id])
    return ActivationMap(class_id=class_id, map=cam.astype(np.float32),
                         source="attention", sample_id=sample_id)


def export_cams(
    net: ClassifierNet,
    samples: list[Sample],
    split: str,
    out_dir: str | Path,
    masks: np.ndarray | None = None,
    class_ids: list[int] | None = None,
) -> Path:
    """Bulk-export maps as cams/{split}/{sample}_{class}.dmt plus an index JSONL."""
    root = Path(out_dir) / "cams" / split
    root.mkdir(parents=True, exist_ok=True)
    classes = class_ids if class_ids is not None else list(range(net.arch.num_classes))
    index_lines = []
    for sample in samples:
        for c in classes:
            if masks is None:
                amap = class_activation_map(net, sample.image, c, sample.index)
            else:
                amap = attention_cam(net, sample.image, c, masks[c], sample.index)
            prob = class_probability(amap, float(net.head_b.value[c]))
            save_dmt(root / f"{sample.index}_{c}.dmt", amap.map)
            index_lines.append(json.dumps({
                "sample_id": sample.index,
                "class_id": c,
                "source": amap.source,
                "probability": prob,
            }, sort_keys=True))
    (root / "index.jsonl").write_text("\n".join(index_lines) + "\n")
    return root
