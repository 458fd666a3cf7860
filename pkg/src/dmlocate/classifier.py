"""Multi-label CAM classifier: conv stack, per-class linear heads over pooled
features, sigmoid scores, batch-weighted cross-entropy.

The attention path and the plain path share one implementation: per-class
pooling weights ``(1 + mask_c) / p^2`` reduce to uniform pooling when the mask
is zero, so a zero mask is bit-identical to no mask at all.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from . import nn, ops
from .corpus import Corpus
from .dmt import load_dmt, save_dmt
from .errors import TrainingDivergedError
from .evaluate import roc_auc
from .utils import read_json, write_json

PROB_CLAMP = 1e-7


@dataclass
class Architecture:
    image_size: int = 64
    num_classes: int = 4
    channels: tuple[int, ...] = (16, 32, 64, 64)
    strides: tuple[int, ...] = (2, 2, 2, 1)
    kernel: int = 3

    @property
    def feature_channels(self) -> int:
        return self.channels[-1]

    @property
    def feature_size(self) -> int:
        size = self.image_size
        pad = self.kernel // 2
        for stride in self.strides:
            size = (size + 2 * pad - self.kernel) // stride + 1
        return size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["strides"] = list(self.strides)
        return d

    @staticmethod
    def from_dict(d: dict) -> "Architecture":
        return Architecture(
            image_size=int(d["image_size"]),
            num_classes=int(d["num_classes"]),
            channels=tuple(d["channels"]),
            strides=tuple(d["strides"]),
            kernel=int(d["kernel"]),
        )


@dataclass
class TrainConfig:
    epochs: int = 5
    lr: float = 1e-4
    batch: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.lr <= 0 or self.batch < 1:
            raise ValueError(f"bad train config: {self}")

    def to_dict(self) -> dict:
        return asdict(self)


class ClassifierNet:
    def __init__(self, arch: Architecture, seed: int, dtype=np.float32):
        self.arch = arch
        self.init_seed = seed
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.blocks: list[tuple[nn.Conv2dLayer, nn.ReLULayer]] = []
        in_ch = 1
        pad = arch.kernel // 2
        for i, (out_ch, stride) in enumerate(zip(arch.channels, arch.strides)):
            conv = nn.Conv2dLayer(in_ch, out_ch, arch.kernel, stride, pad, rng,
                                  f"block{i}", dtype=dtype)
            self.blocks.append((conv, nn.ReLULayer()))
            in_ch = out_ch
        cfc = arch.feature_channels
        self.head_w = nn.Param("head_w", rng.normal(0.0, 1.0 / np.sqrt(cfc),
                                                    (arch.num_classes, cfc)), self.dtype)
        self.head_b = nn.Param("head_b", np.zeros(arch.num_classes), self.dtype)
        self._cache: dict = {}

    # ------------------------------------------------------------------
    def params(self) -> list[nn.Param]:
        out: list[nn.Param] = []
        for conv, _ in self.blocks:
            out.extend(conv.params())
        out.extend([self.head_w, self.head_b])
        return out

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for p in self.params():
            digest.update(p.value.tobytes())
        return digest.hexdigest()

    def _pool_weights(self, masks: np.ndarray | None) -> np.ndarray:
        p = self.arch.feature_size
        k = self.arch.num_classes
        if masks is None:
            masks = np.zeros((k, p, p), dtype=self.dtype)
        masks = np.asarray(masks, dtype=self.dtype)
        if masks.shape != (k, p, p):
            raise ValueError(
                f"masks must be ({k},{p},{p}) to match the feature grid, got {masks.shape}"
            )
        return (1.0 + masks) / self.dtype.type(p * p)

    # ------------------------------------------------------------------
    def features(self, images: np.ndarray, keep_cache: bool = False) -> np.ndarray:
        """Run the conv stack; (N,1,H,W) -> (N,C',p,p)."""
        if images.shape[-1] != self.arch.image_size or images.shape[-2] != self.arch.image_size:
            raise ValueError(
                f"expected {self.arch.image_size}x{self.arch.image_size} images, "
                f"got {images.shape}"
            )
        h = images
        for conv, relu in self.blocks:
            h = relu.forward(conv.forward(h))
        if keep_cache:
            self._cache["features"] = h
        return h

    def block_features(self, images: np.ndarray) -> list[np.ndarray]:
        """Post-activation output of every conv block (perceptual feature taps)."""
        taps = []
        h = images
        for conv, relu in self.blocks:
            h = relu.forward(conv.forward(h))
            taps.append(h)
        return taps

    def input_grad_from_blocks(self, block_grads: list[np.ndarray]) -> np.ndarray:
        """Backprop per-block gradients to the input of the most recent
        block_features call. Parameter grads accumulate but are never stepped
        when the net serves as a frozen extractor."""
        g = None
        for (conv, relu), tap_grad in zip(reversed(self.blocks), reversed(block_grads)):
            g = tap_grad if g is None else g + tap_grad
            g = conv.backward(relu.backward(g))
        return g

    def forward(
        self, images: np.ndarray, masks: np.ndarray | None = None, keep_cache: bool = False
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (features, logits, probabilities); accepts (1,H,W) or (N,1,H,W)."""
        single = images.ndim == 3
        batch = images[None] if single else images
        f = self.features(batch, keep_cache=keep_cache)
        pw = self._pool_weights(masks)
        fp = np.einsum("nkij,cij->nck", f, pw, optimize=True)
        logits = np.einsum("nck,ck->nc", fp, self.head_w.value, optimize=True) + self.head_b.value
        probs = ops.sigmoid(logits).value
        if keep_cache:
            self._cache.update({"fp": fp, "pool_weights": pw, "batch": batch})
        if single:
            return f[0], logits[0], probs[0]
        return f, logits, probs

    def backward(self, dlogits: np.ndarray) -> None:
        """Accumulate gradients from dL/dlogits through head and conv stack."""
        f = self._cache["features"]
        fp = self._cache["fp"]
        pw = self._cache["pool_weights"]
        self.head_w.grad += np.einsum("nc,nck->ck", dlogits, fp, optimize=True)
        self.head_b.grad += dlogits.sum(axis=0)
        df = np.einsum("nc,ck,cij->nkij", dlogits, self.head_w.value, pw, optimize=True)
        g = df.astype(f.dtype)
        for conv, relu in reversed(self.blocks):
            g = conv.backward(relu.backward(g))

    # ------------------------------------------------------------------
    def save(self, out_dir: str | Path, meta: dict | None = None) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for p in self.params():
            save_dmt(out / f"{p.name}.dmt", p.value)
        record = {
            "arch": self.arch.to_dict(),
            "init_seed": self.init_seed,
            "checksum": self.checksum(),
        }
        record.update(meta or {})
        write_json(out / "meta.json", record)
        return out

    @staticmethod
    def load(ckpt_dir: str | Path) -> tuple["ClassifierNet", dict]:
        root = Path(ckpt_dir)
        meta = read_json(root / "meta.json")
        net = ClassifierNet(Architecture.from_dict(meta["arch"]), int(meta["init_seed"]))
        for p in net.params():
            p.value[...] = load_dmt(root / f"{p.name}.dmt")
        return net, meta


# ---------------------------------------------------------------------------
# loss


def weighted_bce(probs: np.ndarray, labels: np.ndarray) -> ops.GradPair:
    """Batch-weighted binary cross-entropy over all (sample, class) entries.

    Positive and negative sums are reweighted by (|P|+|N|)/|P| and
    (|P|+|N|)/|N|; an empty side gets weight zero. Probabilities are clamped
    away from {0,1} before the logs.
    """
    y = np.asarray(labels, dtype=bool)
    if y.shape != probs.shape:
        raise ValueError(f"labels shape {y.shape} != probs shape {probs.shape}")
    total = y.size
    n_pos = int(y.sum())
    n_neg = total - n_pos
    w_pos = total / n_pos if n_pos else 0.0
    w_neg = total / n_neg if n_neg else 0.0
    clamped = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = np.asarray(
        -w_pos * np.log(clamped[y]).sum() - w_neg * np.log1p(-clamped[~y]).sum(),
        dtype=np.float64,
    )

    def grad(g) -> tuple[np.ndarray]:
        inside = (probs > PROB_CLAMP) & (probs < 1.0 - PROB_CLAMP)
        d = np.where(y, -w_pos / clamped, w_neg / (1.0 - clamped))
        d = np.where(inside, d, 0.0)
        return ((d * np.float64(g)).astype(probs.dtype),)

    return ops.GradPair(loss, grad)


def posneg_counts(labels: np.ndarray) -> tuple[int, int]:
    y = np.asarray(labels, dtype=bool)
    return int(y.sum()), int(y.size - y.sum())


# ---------------------------------------------------------------------------
# training and inference


@dataclass
class TrainTrace:
    epoch_loss: list[float] = field(default_factory=list)
    val_auc: list[float] = field(default_factory=list)
    degenerate_batches: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def train_classifier(
    net: ClassifierNet,
    corpus: Corpus,
    config: TrainConfig,
    masks: np.ndarray | None = None,
) -> TrainTrace:
    """Seeded epoch loop with Adam; records per-epoch loss and validation AUC."""
    if masks is not None:
        k = net.arch.num_classes
        masks = np.asarray(masks, dtype=np.float32)
        if masks.shape[0] != k:
            raise ValueError(f"mask set covers {masks.shape[0]} classes, model has {k}")
    images = corpus.images("train")
    labels = corpus.labels("train").astype(np.float32)
    trace = TrainTrace()
    if config.epochs == 0:
        return trace
    opt = nn.Adam(net.params(), config.lr, config.beta1, config.beta2)
    n = images.shape[0]
    for epoch in range(config.epochs):
        order = np.random.default_rng(
            np.random.SeedSequence((config.seed, epoch))
        ).permutation(n)
        losses = []
        for bi, start in enumerate(range(0, n, config.batch)):
            idx = order[start : start + config.batch]
            batch = images[idx]
            ytrue = labels[idx]
            _, logits, probs = net.forward(batch, masks=masks, keep_cache=True)
            pair = weighted_bce(probs, ytrue)
            loss = float(pair.value)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, bi)
            n_pos, n_neg = posneg_counts(ytrue)
            if n_pos == 0 or n_neg == 0:
                trace.degenerate_batches += 1
            dprobs = pair.grad(1.0)[0]
            dlogits = dprobs * probs * (1.0 - probs)
            opt.zero_grad()
            net.backward(dlogits)
            opt.step()
            losses.append(loss / idx.size)
        trace.epoch_loss.append(float(np.mean(losses)))
        trace.val_auc.append(_mean_val_auc(net, corpus, masks))
    return trace


def _mean_val_auc(net: ClassifierNet, corpus: Corpus, masks: np.ndarray | None) -> float:
    if "val" not in corpus.splits or not corpus.splits["val"]:
        return float("nan")
    scores = predict_scores(net, corpus.images("val"), masks=masks)
    labels = corpus.labels("val")
    aucs = []
    for c in range(net.arch.num_classes):
        col = labels[:, c]
        if 0 < col.sum() < len(col):
            aucs.append(roc_auc(scores[:, c].tolist(), col.tolist()))
    return float(np.mean(aucs)) if aucs else float("nan")


def predict_scores(
    net: ClassifierNet,
    images: np.ndarray,
    masks: np.ndarray | None = None,
    batch: int = 64,
) -> np.ndarray:
    """Per-sample per-class probabilities; pure function of (weights, images, masks)."""
    out = []
    for start in range(0, images.shape[0], batch):
        _, _, probs = net.forward(images[start : start + batch], masks=masks)
        out.append(probs)
    return np.concatenate(out, axis=0)
