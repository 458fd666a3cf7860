"""Seeded chest-phantom corpus generator.

Each sample: a fixed phantom (two lung-field ellipses, one offset cardiac
ellipse inside a body ellipse), Gaussian lesion blobs placed per class spec,
then a global affine nuisance over the finished canvas. Ground-truth boxes
are the blobs' 2-sigma extents pushed through the same nuisance.

Every sample draws from its own RNG stream keyed by (seed, split, index), so
parallel and serial generation are bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import ops
from .affine import AffineParams, affine_matrix, invert_affine, transform_box, transform_point
from .corpus import ClassSpec, Corpus, Sample
from .utils import parallel_map

# phantom geometry in normalized [0,1]^2 units: (cx, cy, rx, ry)
BODY_ELLIPSE = (0.5, 0.54, 0.42, 0.44)
LUNG_OFFSET = 0.18  # lung centers at 0.5 +/- offset
LUNG_ELLIPSE = (0.46, 0.155, 0.27)  # (cy, rx, ry)
CARDIAC_ELLIPSE = (0.585, 0.64, 0.145, 0.17)

_SPLIT_CODE = {"train": 0, "val": 1, "test": 2}


@dataclass
class DatasetConfig:
    seed: int = 42
    train: int = 4000
    val: int = 500
    test: int = 1000
    num_classes: int = 4
    image_size: int = 64
    prevalence: tuple[float, ...] | float = 0.2
    rotation_deg: float = 15.0
    scale_lo: float = 0.85
    scale_hi: float = 1.15
    translation_frac: float = 0.10
    normal_fraction: float = 0.4

    def __post_init__(self) -> None:
        if min(self.train, self.val, self.test) <= 0:
            raise ValueError("split counts must be positive")
        for p in self.prevalences():
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"prevalence must be in [0,1], got {p}")
        if not 0.0 <= self.normal_fraction <= 1.0:
            raise ValueError(f"normal fraction must be in [0,1], got {self.normal_fraction}")

    def prevalences(self) -> tuple[float, ...]:
        if isinstance(self.prevalence, (int, float)):
            return (float(self.prevalence),) * self.num_classes
        return tuple(float(p) for p in self.prevalence)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prevalence"] = list(self.prevalences())
        return d

    @staticmethod
    def from_dict(d: dict) -> "DatasetConfig":
        d = dict(d)
        if isinstance(d.get("prevalence"), list):
            d["prevalence"] = tuple(d["prevalence"])
        return DatasetConfig(**d)


def default_taxonomy(num_classes: int = 4) -> list[ClassSpec]:
    """One asymmetric cardiac-region class plus lung classes at spread heights.

    Classes are separable both by where they sit and by local signature
    (blob scale and brightness), so activation maps carry evidence at the
    lesion itself rather than only at anatomy landmarks."""
    if num_classes < 2:
        raise ValueError("taxonomy needs at least an asymmetric and one symmetric class")
    specs = [
        ClassSpec(0, "cardio", (CARDIAC_ELLIPSE[0], CARDIAC_ELLIPSE[1]), 0.02,
                  symmetric=False, blob_size_range=(0.058, 0.085),
                  intensity_range=(0.75, 1.05))
    ]
    lung_x = 0.5 - LUNG_OFFSET
    n_sym = num_classes - 1
    names = ["apex", "hilar", "basal", "pleural", "costal", "lobar", "focal"]
    # size/intensity ladder: small+bright, medium+dim, large+faint, ...
    looks = [(0.045, 0.062, 1.05, 1.40), (0.058, 0.080, 0.50, 0.70),
             (0.085, 0.115, 0.36, 0.50), (0.050, 0.066, 0.80, 1.00),
             (0.070, 0.092, 0.44, 0.60), (0.046, 0.060, 0.62, 0.82),
             (0.062, 0.082, 0.90, 1.15)]
    for i in range(n_sym):
        frac = (i + 0.5) / n_sym
        cy = 0.27 + 0.38 * frac
        name = names[i] if i < len(names) else f"sym{i}"
        lo, hi, ilo, ihi = looks[i % len(looks)]
        specs.append(
            ClassSpec(i + 1, name, (lung_x, cy), 0.03, symmetric=True,
                      blob_size_range=(lo, hi), intensity_range=(ilo, ihi))
        )
    return specs


def _ellipse_mask(size: int, cx: float, cy: float, rx: float, ry: float) -> np.ndarray:
    coords = (np.arange(size) + 0.5) / size
    dx = (coords[None, :] - cx) / rx
    dy = (coords[:, None] - cy) / ry
    return dx * dx + dy * dy <= 1.0


_phantom_cache: dict[int, np.ndarray] = {}


def _paint_phantom(size: int, bg: float, body, lung, cardiac,
                   noise: np.ndarray | None = None) -> np.ndarray:
    canvas = np.full((size, size), bg, dtype=np.float32)
    canvas[_ellipse_mask(size, *body[:4])] = body[4]
    lung_mask = _ellipse_mask(size, *lung[:4])
    lung_mask |= np.flip(lung_mask, axis=1)  # mirrored pair, exactly symmetric
    canvas[lung_mask] = lung[4]
    canvas[_ellipse_mask(size, *cardiac[:4])] = cardiac[4]
    if noise is not None:
        canvas += noise
    return np.clip(2.0 * canvas - 1.0, -1.0, 1.0)[None].astype(np.float32)


def phantom(size: int) -> np.ndarray:
    """Canonical noise-free chest phantom in [-1, 1], shape (1, size, size)."""
    cached = _phantom_cache.get(size)
    if cached is not None:
        return cached
    bcx, bcy, brx, bry = BODY_ELLIPSE
    lcy, lrx, lry = LUNG_ELLIPSE
    ccx, ccy, crx, cry = CARDIAC_ELLIPSE
    out = _paint_phantom(
        size, 0.10,
        (bcx, bcy, brx, bry, 0.46),
        (0.5 - LUNG_OFFSET, lcy, lrx, lry, 0.28),
        (ccx, ccy, crx, cry, 0.58),
    )
    _phantom_cache[size] = out
    return out


def phantom_draw(size: int, rng: np.random.Generator) -> np.ndarray:
    """Per-sample phantom: jittered anatomy plus sensor noise.

    Patient-to-patient variation keeps the classifier from memorizing a fixed
    background template; without it, constant anatomy bumps ride every class
    activation map for free (the class bias absorbs them)."""
    bcx, bcy, brx, bry = BODY_ELLIPSE
    lcy, lrx, lry = LUNG_ELLIPSE
    ccx, ccy, crx, cry = CARDIAC_ELLIPSE
    j = lambda v, lo, hi: v + rng.uniform(lo, hi)
    s = lambda v, lo, hi: v * rng.uniform(lo, hi)
    body = (j(bcx, -0.015, 0.015), j(bcy, -0.015, 0.015),
            s(brx, 0.93, 1.07), s(bry, 0.93, 1.07), j(0.46, -0.04, 0.04))
    lung = (0.5 - j(LUNG_OFFSET, -0.012, 0.012), j(lcy, -0.015, 0.015),
            s(lrx, 0.92, 1.08), s(lry, 0.92, 1.08), j(0.28, -0.04, 0.04))
    cardiac = (j(ccx, -0.015, 0.015), j(ccy, -0.015, 0.015),
               s(crx, 0.90, 1.10), s(cry, 0.90, 1.10), j(0.58, -0.05, 0.05))
    noise = rng.normal(0.0, 0.02, (size, size)).astype(np.float32)
    return _paint_phantom(size, j(0.10, -0.03, 0.03), body, lung, cardiac, noise)


@dataclass
class BlobDraw:
    class_id: int
    center: tuple[float, float]  # normalized
    sigma: tuple[float, float]   # normalized
    amplitude: float


def _draw_blob(spec: ClassSpec, rng: np.random.Generator) -> BlobDraw:
    mx, my = spec.placement_mean
    if spec.symmetric and rng.random() < 0.5:
        mx = 1.0 - mx
    cx = mx + rng.normal(0.0, spec.placement_spread)
    cy = my + rng.normal(0.0, spec.placement_spread)
    sx = rng.uniform(*spec.blob_size_range)
    sy = rng.uniform(*spec.blob_size_range)
    amp = rng.uniform(*spec.intensity_range)
    return BlobDraw(spec.class_id, (cx, cy), (sx, sy), amp)


def _add_blob(canvas: np.ndarray, blob: BlobDraw, size: int) -> None:
    px = np.arange(size, dtype=np.float32)
    cx = blob.center[0] * size
    cy = blob.center[1] * size
    sx = max(blob.sigma[0] * size, 1e-3)
    sy = max(blob.sigma[1] * size, 1e-3)
    gx = np.exp(-0.5 * ((px - cx) / sx) ** 2)
    gy = np.exp(-0.5 * ((px - cy) / sy) ** 2)
    canvas[0] += np.float32(blob.amplitude) * gy[:, None] * gx[None, :]


def render_sample(
    index: int,
    blobs: list[BlobDraw],
    nuisance: AffineParams,
    size: int,
    num_classes: int,
    background: np.ndarray | None = None,
) -> Sample:
    """Render blobs onto the phantom, warp by the nuisance, derive boxes/labels."""
    if size < 32:
        raise ValueError(f"image size must be >= 32, got {size}")
    canvas = (background if background is not None else phantom(size)).copy()
    for blob in blobs:
        _add_blob(canvas, blob, size)
    np.clip(canvas, -1.0, 1.0, out=canvas)

    content = affine_matrix(nuisance)
    image = ops.affine_warp(canvas, invert_affine(content)).value

    labels = np.zeros(num_classes, dtype=np.int8)
    boxes = []
    for blob in blobs:
        cx = blob.center[0] * size
        cy = blob.center[1] * size
        bw = 4.0 * blob.sigma[0] * size
        bh = 4.0 * blob.sigma[1] * size
        raw_box = (cx - bw / 2.0, cy - bh / 2.0, bw, bh)
        moved = transform_box(raw_box, content, size, size)
        peak = transform_point((cx, cy), content, size, size)
        inside = 0.0 <= peak[0] <= size - 1.0 and 0.0 <= peak[1] <= size - 1.0
        if moved is None or not inside:
            continue  # blob clipped away: drop it and its label
        labels[blob.class_id] = 1
        boxes.append((blob.class_id, *moved))

    return Sample(
        index=index,
        image=np.asarray(image, dtype=np.float32),
        labels=labels,
        boxes=boxes,
        nuisance=nuisance,
        is_normal=bool(labels.sum() == 0),
    )


def _sample_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, _SPLIT_CODE[split], index)))


def _make_sample(config: DatasetConfig, taxonomy: list[ClassSpec], split: str,
                 index: int) -> Sample:
    rng = _sample_rng(config.seed, split, index)
    rot = math.radians(config.rotation_deg)
    nuisance = AffineParams(
        sx=float(rng.uniform(config.scale_lo, config.scale_hi)),
        sy=float(rng.uniform(config.scale_lo, config.scale_hi)),
        tx=float(rng.uniform(-2.0 * config.translation_frac, 2.0 * config.translation_frac)),
        ty=float(rng.uniform(-2.0 * config.translation_frac, 2.0 * config.translation_frac)),
        theta=float(rng.uniform(-rot, rot)),
    )
    background = phantom_draw(config.image_size, rng)
    blobs: list[BlobDraw] = []
    if rng.random() >= config.normal_fraction:
        active = 1.0 - config.normal_fraction
        for spec, prev in zip(taxonomy, config.prevalences()):
            cond = min(1.0, prev / active) if active > 0 else 0.0
            if rng.random() < cond:
                blobs.append(_draw_blob(spec, rng))
    return render_sample(index, blobs, nuisance, config.image_size, config.num_classes,
                         background=background)


def generate_dataset(config: DatasetConfig, taxonomy: list[ClassSpec]) -> Corpus:
    """Deterministic three-split corpus; see module docstring for the protocol."""
    if len(taxonomy) != config.num_classes:
        raise ValueError(
            f"taxonomy has {len(taxonomy)} classes, config expects {config.num_classes}"
        )
    splits = {}
    for split, count in (("train", config.train), ("val", config.val), ("test", config.test)):
        splits[split] = parallel_map(
            lambda idx, s=split: _make_sample(config, taxonomy, s, idx), range(count)
        )

    warnings = []
    counts = {}
    for split, samples in splits.items():
        per_class = np.zeros(config.num_classes, dtype=int)
        for s in samples:
            per_class += s.labels
        counts[split] = [int(v) for v in per_class]
    for c, n in enumerate(counts["train"]):
        if n == 0:
            warnings.append(
                f"class {c} ({taxonomy[c].name}) drew zero positive train samples"
            )
    report = {
        "positives_per_class": counts,
        "normals": {split: sum(1 for s in samples if s.is_normal)
                    for split, samples in splits.items()},
        "warnings": warnings,
        "note": "placement statistics are invented defaults, not measured priors",
    }
    return Corpus(config=config.to_dict(), taxonomy=taxonomy, splits=splits, report=report)
