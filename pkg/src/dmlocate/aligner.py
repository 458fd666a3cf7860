"""Affine alignment toward a mean-of-normals anchor image.

A small conv regressor predicts (sx, sy, tx, ty, theta) per image; the image
is warped, average-pooled, and bilinearly restored (the pooling kernel keeps
16 windows per side at any resolution), then pulled toward the anchor by a
per-pixel Euclidean term plus feature-space distances taken from a frozen
pretrained classifier.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import nn, ops
from .affine import AffineParams, matrix_from_vector, matrix_vjp, invert_affine
from .classifier import ClassifierNet
from .corpus import Corpus, Sample
from .dmt import load_dmt, save_dmt
from .errors import TrainingDivergedError
from .utils import read_json, write_json

IDENTITY_VEC = np.array([1.0, 1.0, 0.0, 0.0, 0.0], dtype=np.float32)


@dataclass
class AnchorImage:
    image: np.ndarray  # (1, H, W)
    sample_count: int
    source_split: str


def build_anchor(normal_images: list[np.ndarray], count: int, seed: int,
                 source_split: str = "train") -> AnchorImage:
    """Pixel-wise mean of a seeded random choice of normal samples."""
    if count < 1:
        raise ValueError("anchor needs at least one sample")
    if len(normal_images) < count:
        raise ValueError(
            f"need {count} normal samples for the anchor but only "
            f"{len(normal_images)} are available"
        )
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(normal_images), size=count, replace=False)
    acc = np.zeros_like(normal_images[0], dtype=np.float64)
    for i in picks:
        acc += normal_images[i]
    return AnchorImage(image=(acc / count).astype(np.float32),
                       sample_count=count, source_split=source_split)


def save_anchor(anchor: AnchorImage, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_dmt(out / "anchor.dmt", anchor.image)
    write_json(out / "anchor.json", {
        "sample_count": anchor.sample_count,
        "source_split": anchor.source_split,
    })
    return out


def load_anchor(anchor_dir: str | Path) -> AnchorImage:
    root = Path(anchor_dir)
    meta = read_json(root / "anchor.json")
    return AnchorImage(image=load_dmt(root / "anchor.dmt"),
                       sample_count=int(meta["sample_count"]),
                       source_split=meta["source_split"])


# ---------------------------------------------------------------------------
# differentiable warp -> pool -> restore


def transform_image_batch(images: np.ndarray, param_vecs: np.ndarray,
                          pool_kernel: int) -> ops.GradPair:
    """Warp by the five-parameter affine, smooth via pool+bilinear restore.

    grad(upstream) returns (d_images, d_param_vecs)."""
    n, _, h, w = images.shape
    if pool_kernel < 1 or h % pool_kernel or w % pool_kernel:
        raise ValueError(f"pool kernel {pool_kernel} must divide image extents {h}x{w}")
    vecs = np.asarray(param_vecs, dtype=np.float32)
    mats = matrix_from_vector(vecs).astype(np.float32)
    warp = ops.affine_warp(images, mats)
    if pool_kernel == 1:
        value = warp.value

        def grad1(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
            dimg, dmat = warp.grad(g)
            return dimg, matrix_vjp(vecs, dmat).astype(np.float32)

        return ops.GradPair(value, grad1)

    pool = ops.avg_pool2d(warp.value, pool_kernel, pool_kernel)
    restore = ops.bilinear_resample(pool.value, h, w)

    def grad(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        (dpool,) = restore.grad(g)
        (dwarp,) = pool.grad(dpool)
        dimg, dmat = warp.grad(dwarp)
        return dimg, matrix_vjp(vecs, dmat).astype(np.float32)

    return ops.GradPair(restore.value, grad)


def transform_image(image: np.ndarray, params: AffineParams, pool_kernel: int) -> np.ndarray:
    single = image.ndim == 3
    batch = image[None] if single else image
    vec = np.asarray(params.as_tuple(), dtype=np.float32)[None]
    out = transform_image_batch(batch, np.repeat(vec, batch.shape[0], axis=0), pool_kernel).value
    return out[0] if single else out


def transform_image_vec(image: np.ndarray, param_vec: np.ndarray,
                        pool_kernel: int) -> ops.GradPair:
    """Single-image view of transform_image_batch, gradient w.r.t. the 5 params."""
    pair = transform_image_batch(image[None], np.asarray(param_vec, dtype=np.float32)[None],
                                 pool_kernel)

    def grad(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        dimg, dvec = pair.grad(g[None])
        return dimg[0], dvec[0]

    return ops.GradPair(pair.value[0], grad)


# ---------------------------------------------------------------------------
# losses


def _perceptual_terms(anchor_taps: list[np.ndarray], taps: list[np.ndarray],
                      layer_ids: tuple[int, ...]) -> tuple[np.ndarray, list]:
    """Per-sample feature distances and the pieces needed for their backward."""
    n = taps[0].shape[0] if taps else 1
    total = np.zeros(n, dtype=np.float64)
    pieces = []
    for s in layer_ids:
        diff = taps[s] - anchor_taps[s]
        size = float(np.prod(diff.shape[1:]))
        norm = np.sqrt((diff.astype(np.float64) ** 2).sum(axis=(1, 2, 3)))
        total += norm / size
        pieces.append((s, diff, norm, size))
    return total, pieces


def alignment_loss(
    anchor: AnchorImage,
    transformed: np.ndarray,
    extractor: ClassifierNet | None = None,
    layer_ids: tuple[int, ...] = (),
) -> tuple[float, float, float]:
    """(total, perceptual, euclidean) against the anchor, for one image.

    Euclidean: sum over pixels of the per-pixel channel-vector norm.
    Perceptual: sum over chosen layers of size-normalized feature distance.
    """
    if transformed.shape != anchor.image.shape:
        raise ValueError(
            f"transformed shape {transformed.shape} != anchor shape {anchor.image.shape}"
        )
    if layer_ids and extractor is None:
        raise ValueError("layer ids given but no feature extractor")
    diff = transformed.astype(np.float64) - anchor.image.astype(np.float64)
    euclid = float(np.sqrt((diff ** 2).sum(axis=0)).sum())
    perceptual = 0.0
    if layer_ids:
        n_blocks = len(extractor.blocks)
        if any(s < 0 or s >= n_blocks for s in layer_ids):
            raise ValueError(f"layer ids {layer_ids} out of range for {n_blocks} blocks")
        anchor_taps = extractor.block_features(anchor.image[None])
        taps = extractor.block_features(transformed[None])
        total, _ = _perceptual_terms(anchor_taps, taps, tuple(layer_ids))
        perceptual = float(total[0])
    return euclid + perceptual, perceptual, euclid


# ---------------------------------------------------------------------------
# the regressor


class AlignerNet:
    """Conv stack + linear head emitting (sx, sy, tx, ty, theta).

    The head starts at zero weights with an identity-transform bias, so the
    untrained module is exactly a no-op alignment."""

    def __init__(self, image_size: int, seed: int):
        self.image_size = image_size
        self.init_seed = seed
        rng = np.random.default_rng(seed)
        self.convs = [
            nn.Conv2dLayer(1, 8, 3, 2, 1, rng, "al0"),
            nn.Conv2dLayer(8, 16, 3, 2, 1, rng, "al1"),
            nn.Conv2dLayer(16, 32, 3, 2, 1, rng, "al2"),
        ]
        self.relus = [nn.ReLULayer() for _ in self.convs]
        side = image_size // 8
        self.flat_dim = 32 * side * side
        self.fc1 = nn.LinearLayer(self.flat_dim, 64, rng, "al_fc1")
        self.fc1_relu = nn.ReLULayer()
        self.fc2 = nn.LinearLayer(64, 5, rng, "al_fc2", zero_init=True)
        self.fc2.bias.value[...] = IDENTITY_VEC

    def params(self) -> list[nn.Param]:
        out: list[nn.Param] = []
        for conv in self.convs:
            out.extend(conv.params())
        out.extend(self.fc1.params())
        out.extend(self.fc2.params())
        return out

    def forward(self, images: np.ndarray) -> np.ndarray:
        h = images
        for conv, relu in zip(self.convs, self.relus):
            h = relu.forward(conv.forward(h))
        self._pre_flat_shape = h.shape
        flat = h.reshape(h.shape[0], -1)
        return self.fc2.forward(self.fc1_relu.forward(self.fc1.forward(flat)))

    def backward(self, dvecs: np.ndarray) -> None:
        g = self.fc1.backward(self.fc1_relu.backward(self.fc2.backward(dvecs)))
        g = g.reshape(self._pre_flat_shape)
        for conv, relu in zip(reversed(self.convs), reversed(self.relus)):
            g = conv.backward(relu.backward(g))

    def predict(self, images: np.ndarray, batch: int = 64) -> np.ndarray:
        out = []
        for start in range(0, images.shape[0], batch):
            out.append(self.forward(images[start : start + batch]))
        return np.concatenate(out, axis=0)

    def save(self, out_dir: str | Path, meta: dict | None = None) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for p in self.params():
            save_dmt(out / f"{p.name}.dmt", p.value)
        record = {"image_size": self.image_size, "init_seed": self.init_seed}
        record.update(meta or {})
        write_json(out / "meta.json", record)
        return out

    @staticmethod
    def load(ckpt_dir: str | Path) -> tuple["AlignerNet", dict]:
        root = Path(ckpt_dir)
        meta = read_json(root / "meta.json")
        net = AlignerNet(int(meta["image_size"]), int(meta["init_seed"]))
        for p in net.params():
            p.value[...] = load_dmt(root / f"{p.name}.dmt")
        return net, meta


# ---------------------------------------------------------------------------
# training


@dataclass
class AlignTrainConfig:
    epochs: int = 5
    lr: float = 1e-3
    batch: int = 16
    seed: int = 0
    pool_kernel: int = 0  # 0 = image_size // 16
    layer_ids: tuple[int, ...] = (0, 1, 2, 3)
    # gradients are scaled by 1/(H*W): equivalent to optimizing the per-pixel
    # mean objective, which keeps the stated lr usable at any resolution
    scale_grad_by_pixels: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_ids"] = list(self.layer_ids)
        return d


@dataclass
class AlignTrace:
    train_loss: list[float] = field(default_factory=list)
    val_total: list[float] = field(default_factory=list)
    val_perceptual: list[float] = field(default_factory=list)
    val_euclidean: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _batch_losses(anchor: AnchorImage, transformed: np.ndarray,
                  extractor: ClassifierNet, layer_ids: tuple[int, ...],
                  anchor_taps: list[np.ndarray], want_grad: bool):
    """Vectorized Euclidean + perceptual terms for a batch of transformed images."""
    diff = transformed - anchor.image[None]
    euclid = np.abs(diff.astype(np.float64)).sum(axis=(1, 2, 3))  # single channel norm
    taps = extractor.block_features(transformed) if layer_ids else []
    perceptual, pieces = _perceptual_terms(anchor_taps, taps, layer_ids)
    total = euclid + perceptual
    if not want_grad:
        return total, perceptual, euclid, None

    def grad_transformed() -> np.ndarray:
        d = np.sign(diff).astype(np.float32)
        if layer_ids:
            block_grads = [np.zeros_like(t) for t in taps]
            for s, tap_diff, norm, size in pieces:
                safe = np.maximum(norm, 1e-12)[:, None, None, None]
                block_grads[s] += (tap_diff / safe / size).astype(np.float32)
            d = d + extractor.input_grad_from_blocks(block_grads)
        return d

    return total, perceptual, euclid, grad_transformed


def evaluate_alignment(net: AlignerNet, samples: list[Sample], anchor: AnchorImage,
                       extractor: ClassifierNet, config: AlignTrainConfig,
                       batch: int = 64) -> tuple[float, float, float]:
    """Mean (total, perceptual, euclidean) of the current net over samples."""
    pool_kernel = config.pool_kernel or anchor.image.shape[-1] // 16
    anchor_taps = extractor.block_features(anchor.image[None]) if config.layer_ids else []
    total = perc = eucl = 0.0
    images = np.stack([s.image for s in samples])
    for start in range(0, len(samples), batch):
        chunk = images[start : start + batch]
        vecs = net.forward(chunk)
        moved = transform_image_batch(chunk, vecs, pool_kernel).value
        t, p, e, _ = _batch_losses(anchor, moved, extractor, config.layer_ids,
                                   anchor_taps, want_grad=False)
        total += float(t.sum())
        perc += float(p.sum())
        eucl += float(e.sum())
    n = len(samples)
    return total / n, perc / n, eucl / n


def train_aligner(
    net: AlignerNet,
    corpus: Corpus,
    anchor: AnchorImage,
    extractor: ClassifierNet,
    config: AlignTrainConfig,
) -> AlignTrace:
    """Plain SGD on total alignment loss; the extractor stays frozen."""
    trace = AlignTrace()
    pool_kernel = config.pool_kernel or anchor.image.shape[-1] // 16
    val = corpus.splits.get("val") or corpus.splits["train"][:64]
    t0, p0, e0 = evaluate_alignment(net, val, anchor, extractor, config)
    trace.val_total.append(t0)
    trace.val_perceptual.append(p0)
    trace.val_euclidean.append(e0)
    if config.epochs == 0:
        return trace
    anchor_taps = extractor.block_features(anchor.image[None]) if config.layer_ids else []
    images = corpus.images("train")
    n = images.shape[0]
    pixels = float(np.prod(anchor.image.shape))
    gscale = np.float32(1.0 / pixels if config.scale_grad_by_pixels else 1.0)
    opt = nn.SGD(net.params(), config.lr)
    for epoch in range(config.epochs):
        order = np.random.default_rng(
            np.random.SeedSequence((config.seed, epoch, 7))
        ).permutation(n)
        epoch_total = 0.0
        for bi, start in enumerate(range(0, n, config.batch)):
            idx = order[start : start + config.batch]
            chunk = images[idx]
            vecs = net.forward(chunk)
            moved = transform_image_batch(chunk, vecs, pool_kernel)
            total, _, _, grad_fn = _batch_losses(
                anchor, moved.value, extractor, config.layer_ids, anchor_taps, True
            )
            batch_loss = float(total.sum())
            if not np.isfinite(batch_loss):
                raise TrainingDivergedError(epoch, bi)
            epoch_total += batch_loss
            dmoved = grad_fn() * (gscale / np.float32(idx.size))
            _, dvecs = moved.grad(dmoved)
            opt.zero_grad()
            net.backward(dvecs)
            opt.step()
        trace.train_loss.append(epoch_total / n)
        tv, pv, ev = evaluate_alignment(net, val, anchor, extractor, config)
        trace.val_total.append(tv)
        trace.val_perceptual.append(pv)
        trace.val_euclidean.append(ev)
    return trace


# ---------------------------------------------------------------------------
# dataset alignment


def align_dataset(net: AlignerNet, corpus: Corpus, pool_kernel: int = 0,
                  smooth: bool = False, batch: int = 64) -> Corpus:
    """Replace every image with its predicted-parameter transform; boxes ride
    through the same affine and the predicted params are stored per sample.

    smooth=True additionally applies the pool+restore blur the alignment loss
    uses; the default keeps full-resolution warps for the classifier, since
    the blur exists to match the averaged anchor, not to feed recognition."""
    size = corpus.image_size
    pool_kernel = pool_kernel or size // 16
    new_splits: dict[str, list[Sample]] = {}
    for split, samples in corpus.splits.items():
        if not samples:
            new_splits[split] = []
            continue
        images = np.stack([s.image for s in samples])
        vecs = net.predict(images, batch=batch)
        moved = []
        for start in range(0, len(samples), batch):
            chunk = images[start : start + batch]
            vchunk = vecs[start : start + batch]
            out = transform_image_batch(chunk, vchunk, pool_kernel if smooth else 1).value
            moved.append(out)
        moved = np.concatenate(moved, axis=0)
        out_samples = []
        for i, s in enumerate(samples):
            params = AffineParams(*[float(v) for v in vecs[i]])
            content = invert_affine(matrix_from_vector(vecs[i : i + 1])[0])
            boxes = []
            for b in s.boxes:
                moved_box = _move_box(b, content, size)
                if moved_box is not None:
                    boxes.append(moved_box)
            out_samples.append(
                Sample(index=s.index, image=moved[i].astype(np.float32),
                       labels=s.labels.copy(), boxes=boxes, nuisance=s.nuisance,
                       is_normal=s.is_normal, align_params=params)
            )
        new_splits[split] = out_samples
    config = dict(corpus.config)
    config["aligned"] = True
    return Corpus(config=config, taxonomy=corpus.taxonomy, splits=new_splits,
                  report=corpus.report)


def _move_box(box, content, size):
    from .affine import transform_box

    moved = transform_box((box[1], box[2], box[3], box[4]), content, size, size)
    if moved is None:
        return None
    return (box[0], *moved)
