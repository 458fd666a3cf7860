"""Corpus container and on-disk layout, plus the raw PGM importer.

Directory layout::

    images/{split}/{index}.dmt     DMT1 tensors, (1, H, W) in [-1, 1]
    labels/{split}.jsonl           one JSON object per sample
    taxonomy.json, config.json, report.json
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .affine import AffineParams
from .dmt import load_dmt, save_dmt
from .utils import hash_files, read_json, write_json

SPLITS = ("train", "val", "test")

Box = tuple[int, float, float, float, float]  # class_id, x, y, w, h


@dataclass
class ClassSpec:
    class_id: int
    name: str
    placement_mean: tuple[float, float]
    placement_spread: float
    symmetric: bool
    blob_size_range: tuple[float, float]
    intensity_range: tuple[float, float]

    def __post_init__(self) -> None:
        mx, my = self.placement_mean
        if not (0.0 <= mx <= 1.0 and 0.0 <= my <= 1.0):
            raise ValueError(f"placement mean must lie in [0,1]^2, got {self.placement_mean}")
        if self.blob_size_range[0] > self.blob_size_range[1]:
            raise ValueError(f"blob size range reversed: {self.blob_size_range}")
        if self.intensity_range[0] > self.intensity_range[1]:
            raise ValueError(f"intensity range reversed: {self.intensity_range}")

    def to_dict(self) -> dict:
        return {
            "class_id": self.class_id,
            "name": self.name,
            "placement_mean": list(self.placement_mean),
            "placement_spread": self.placement_spread,
            "symmetric": self.symmetric,
            "blob_size_range": list(self.blob_size_range),
            "intensity_range": list(self.intensity_range),
        }

    @staticmethod
    def from_dict(d: dict) -> "ClassSpec":
        return ClassSpec(
            class_id=int(d["class_id"]),
            name=d["name"],
            placement_mean=tuple(d["placement_mean"]),
            placement_spread=float(d["placement_spread"]),
            symmetric=bool(d["symmetric"]),
            blob_size_range=tuple(d["blob_size_range"]),
            intensity_range=tuple(d["intensity_range"]),
        )


@dataclass
class Sample:
    index: int
    image: np.ndarray
    labels: np.ndarray
    boxes: list[Box]
    nuisance: AffineParams | None
    is_normal: bool
    align_params: AffineParams | None = None

    def record(self) -> dict:
        rec = {
            "index": self.index,
            "labels": [int(v) for v in self.labels],
            "boxes": [[int(b[0])] + [float(v) for v in b[1:]] for b in self.boxes],
            "nuisance": list(self.nuisance.as_tuple()) if self.nuisance else None,
            "is_normal": bool(self.is_normal),
        }
        if self.align_params is not None:
            rec["align_params"] = list(self.align_params.as_tuple())
        return rec


@dataclass
class Corpus:
    config: dict
    taxonomy: list[ClassSpec]
    splits: dict[str, list[Sample]]
    report: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.taxonomy)

    @property
    def image_size(self) -> int:
        return int(self.splits["train"][0].image.shape[-1]) if self.splits.get("train") else int(
            self.config.get("image_size", 0)
        )

    def images(self, split: str) -> np.ndarray:
        return np.stack([s.image for s in self.splits[split]])

    def labels(self, split: str) -> np.ndarray:
        return np.stack([s.labels for s in self.splits[split]])

    def normals(self, split: str) -> list[Sample]:
        return [s for s in self.splits[split] if s.is_normal]


def _params_from(rec) -> AffineParams | None:
    if rec is None:
        return None
    return AffineParams(*[float(v) for v in rec])


def save_corpus(corpus: Corpus, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    write_json(out / "config.json", corpus.config)
    write_json(out / "taxonomy.json", [c.to_dict() for c in corpus.taxonomy])
    write_json(out / "report.json", corpus.report)
    for split, samples in corpus.splits.items():
        lines = []
        for s in samples:
            save_dmt(out / "images" / split / f"{s.index}.dmt", s.image)
            lines.append(json.dumps(s.record(), sort_keys=True))
        labels_path = out / "labels" / f"{split}.jsonl"
        labels_path.parent.mkdir(parents=True, exist_ok=True)
        labels_path.write_text("\n".join(lines) + ("\n" if lines else ""))
    return out


def load_corpus(corpus_dir: str | Path, splits: tuple[str, ...] | None = None) -> Corpus:
    root = Path(corpus_dir)
    config = read_json(root / "config.json")
    taxonomy = [ClassSpec.from_dict(d) for d in read_json(root / "taxonomy.json")]
    report = read_json(root / "report.json") if (root / "report.json").exists() else {}
    out_splits: dict[str, list[Sample]] = {}
    wanted = splits or tuple(
        sorted(p.stem for p in (root / "labels").glob("*.jsonl"))
    )
    for split in wanted:
        samples = []
        path = root / "labels" / f"{split}.jsonl"
        for line in path.read_text().splitlines():
            rec = json.loads(line)
            idx = int(rec["index"])
            samples.append(
                Sample(
                    index=idx,
                    image=load_dmt(root / "images" / split / f"{idx}.dmt"),
                    labels=np.asarray(rec["labels"], dtype=np.int8),
                    boxes=[(int(b[0]), float(b[1]), float(b[2]), float(b[3]), float(b[4]))
                           for b in rec["boxes"]],
                    nuisance=_params_from(rec.get("nuisance")),
                    is_normal=bool(rec["is_normal"]),
                    align_params=_params_from(rec.get("align_params")),
                )
            )
        samples.sort(key=lambda s: s.index)
        out_splits[split] = samples
    return Corpus(config=config, taxonomy=taxonomy, splits=out_splits, report=report)


def corpus_hash(corpus_dir: str | Path) -> str:
    root = Path(corpus_dir)
    paths = [root / "config.json", root / "taxonomy.json"]
    paths.extend(sorted((root / "labels").glob("*.jsonl")))
    for split_dir in sorted((root / "images").glob("*")):
        paths.extend(sorted(split_dir.glob("*.dmt")))
    return hash_files(paths)


# ---------------------------------------------------------------------------
# binary PGM (P5) support


def write_pgm(path: str | Path, gray: np.ndarray) -> None:
    arr = np.ascontiguousarray(gray, dtype=np.uint8)
    if arr.ndim != 2:
        raise ValueError(f"PGM writer needs a 2-D array, got shape {arr.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary P5 PGM")
    # header = magic, width, height, maxval separated by whitespace/comments
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3:
        match = re.match(rb"(?:\s+|#[^\n]*\n)*(\d+)", raw[pos:])
        if not match:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(match.group(1))
        pos += match.end()
    width, height, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported, maxval={maxval}")
    pos += 1  # single whitespace byte before the payload
    data = np.frombuffer(raw, dtype=np.uint8, count=width * height, offset=pos)
    return data.reshape(height, width).copy()


def import_pgm_corpus(src_dir: str | Path, labels_jsonl: str | Path,
                      num_classes: int, taxonomy: list[ClassSpec] | None = None) -> Corpus:
    """Build a corpus from external P5 images plus a sidecar labels JSONL.

    Each JSONL record needs: file, split, labels; boxes are optional
    ``[class_id, x, y, w, h]`` rows. Pixel values map onto [-1, 1].
    """
    src = Path(src_dir)
    splits: dict[str, list[Sample]] = {}
    counters: dict[str, int] = {}
    for line in Path(labels_jsonl).read_text().splitlines():
        rec = json.loads(line)
        split = rec.get("split", "train")
        gray = read_pgm(src / rec["file"])
        image = (gray.astype(np.float32) / 127.5 - 1.0)[None]
        labels = np.zeros(num_classes, dtype=np.int8)
        for c in rec["labels"]:
            labels[int(c)] = 1
        boxes = [(int(b[0]), float(b[1]), float(b[2]), float(b[3]), float(b[4]))
                 for b in rec.get("boxes", [])]
        idx = counters.get(split, 0)
        counters[split] = idx + 1
        splits.setdefault(split, []).append(
            Sample(index=idx, image=image, labels=labels, boxes=boxes,
                   nuisance=None, is_normal=bool(labels.sum() == 0))
        )
    config = {"source": "pgm-import", "num_classes": num_classes,
              "image_size": int(next(iter(splits.values()))[0].image.shape[-1])}
    return Corpus(config=config, taxonomy=taxonomy or [], splits=splits)
