"""Weight-shared convolutional embedder with contrastive training.

Two identical sub-networks (one weight set, evaluated twice) embed a pair
of trajectory images; the Euclidean distance between embeddings is
compared against a threshold selected on validation data. The loss is

    L(d, y) = alpha * (1 - y) * d^2 + beta * y * max(0, m - d)^2

with y = 0 for similar (co-behavior) pairs and y = 1 for dissimilar ones.
Training is plain mini-batch SGD with momentum, reproducible from a seed.
"""

from __future__ import annotations

import datetime
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from trajmatch import nn
from trajmatch.errors import ModelError, TrainingDivergedError
from trajmatch.evaluation import ConfusionCounts, Metrics, compute_metrics, stratified_fold_ids

MODEL_FORMAT = "trajmatch-siamese-model"
MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ContrastiveParams:
    alpha: float = 1.0
    beta: float = 1.0
    margin: float = 1.0

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0 or self.margin <= 0:
            raise ModelError("alpha, beta and margin must be positive")


@dataclass(frozen=True)
class SiameseArchitecture:
    input_size: int = 128
    conv_channels: tuple[int, ...] = (8, 16, 32)
    kernel: int = 3
    embedding_dim: int = 128
    dtype: str = "float32"

    def feature_shape(self) -> tuple[int, int]:
        """(channels, side) after the conv/pool stack."""
        side = self.input_size
        for _ in self.conv_channels:
            side = side - self.kernel + 1
            if side < 2:
                raise ModelError(f"input_size {self.input_size} too small for the stack")
            side //= 2
        return self.conv_channels[-1], side


@dataclass(frozen=True)
class OptimizerConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-3
    momentum: float = 0.9


@dataclass
class TrainingPair:
    input_a: np.ndarray  # uint8 [S, S, 3], already network sized
    input_b: np.ndarray
    y: int  # 0 similar, 1 dissimilar
    pair_id: str = ""
    local_date: Optional[datetime.date] = None
    layer_index: int = 0

    def day_key(self) -> tuple[str, Optional[datetime.date]]:
        return (self.pair_id, self.local_date)


def build_network(arch: SiameseArchitecture, rng: Optional[np.random.Generator]) -> nn.Network:
    if rng is None:
        rng = np.random.default_rng(0)  # weights expected to be overwritten
    dtype = nn.DTYPES[arch.dtype]
    layers: list[nn.Layer] = []
    in_ch = 3
    for li, out_ch in enumerate(arch.conv_channels):
        layers.append(
            nn.Conv2D(in_ch, out_ch, arch.kernel, rng, dtype, needs_input_grad=li > 0)
        )
        layers.append(nn.ReLU())
        layers.append(nn.MaxPool2())
        in_ch = out_ch
    ch, side = arch.feature_shape()
    layers.append(nn.Flatten())
    layers.append(nn.Dense(ch * side * side, arch.embedding_dim, rng, dtype))
    return nn.Network(layers)


@dataclass
class SiameseModel:
    arch: SiameseArchitecture
    net: nn.Network
    distance_threshold: Optional[float] = None
    seed: Optional[int] = None
    meta: dict = field(default_factory=dict)

    @property
    def input_size(self) -> int:
        return self.arch.input_size

    def embed_batch(self, images_u8: Sequence[np.ndarray]) -> np.ndarray:
        x = to_network_batch(images_u8, self.arch)
        return self.net.forward(x)

    def save(self, path) -> None:
        weights = []
        for i, p in enumerate(self.net.params()):
            weights.append({"index": i, "shape": list(p.shape), "data": p.reshape(-1).tolist()})
        doc = {
            "format": MODEL_FORMAT,
            "format_version": MODEL_FORMAT_VERSION,
            "architecture": {
                "input_size": self.arch.input_size,
                "conv_channels": list(self.arch.conv_channels),
                "kernel": self.arch.kernel,
                "embedding_dim": self.arch.embedding_dim,
                "dtype": self.arch.dtype,
            },
            "distance_threshold": self.distance_threshold,
            "seed": self.seed,
            "meta": self.meta,
            "weights": weights,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True)

    @classmethod
    def load(cls, path) -> "SiameseModel":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("format") != MODEL_FORMAT:
            raise ModelError(f"not a siamese model file: {path}")
        if doc.get("format_version") != MODEL_FORMAT_VERSION:
            raise ModelError(f"unsupported model format version {doc.get('format_version')}")
        a = doc["architecture"]
        arch = SiameseArchitecture(
            input_size=int(a["input_size"]),
            conv_channels=tuple(int(c) for c in a["conv_channels"]),
            kernel=int(a["kernel"]),
            embedding_dim=int(a["embedding_dim"]),
            dtype=a["dtype"],
        )
        net = build_network(arch, None)
        params = net.params()
        if len(params) != len(doc["weights"]):
            raise ModelError("weight count mismatch")
        dtype = nn.DTYPES[arch.dtype]
        for p, w in zip(params, doc["weights"]):
            arr = np.asarray(w["data"], dtype=dtype).reshape(w["shape"])
            if arr.shape != p.shape:
                raise ModelError(f"weight shape mismatch: {arr.shape} vs {p.shape}")
            p[...] = arr
        thr = doc.get("distance_threshold")
        return cls(
            arch,
            net,
            None if thr is None else float(thr),
            doc.get("seed"),
            doc.get("meta", {}),
        )


# --- preprocessing ----------------------------------------------------------

def resize_nearest(img_u8: np.ndarray, size: int) -> np.ndarray:
    """Deterministic nearest-neighbor resize of [H, W, 3] to [size, size, 3]."""
    h, w = img_u8.shape[:2]
    rows = (np.arange(size, dtype=np.int64) * h) // size
    cols = (np.arange(size, dtype=np.int64) * w) // size
    return np.ascontiguousarray(img_u8[np.ix_(rows, cols)])


def to_network_batch(images_u8: Sequence[np.ndarray], arch: SiameseArchitecture) -> np.ndarray:
    """Stack uint8 [S,S,3] images into NHWC floats; background maps to 0."""
    dtype = nn.DTYPES[arch.dtype]
    arr = np.stack([np.asarray(im) for im in images_u8])
    if arr.shape[1:] != (arch.input_size, arch.input_size, 3):
        raise ModelError(
            f"expected images of shape ({arch.input_size},{arch.input_size},3), got {arr.shape[1:]}"
        )
    return (dtype(255) - arr.astype(dtype)) / dtype(255)


def embed(model: SiameseModel, image_u8: np.ndarray) -> np.ndarray:
    """Embedding of one preprocessed image (deterministic forward pass)."""
    return model.embed_batch([image_u8])[0]


def distance(e1: np.ndarray, e2: np.ndarray) -> float:
    """Euclidean distance between two embeddings."""
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    if e1.shape != e2.shape:
        raise ModelError(f"embedding dimension mismatch: {e1.shape} vs {e2.shape}")
    d = e1 - e2
    return float(np.sqrt(np.sum(d * d)))


def score_pair(model: SiameseModel, img_a_u8: np.ndarray, img_b_u8: np.ndarray) -> float:
    """Distance between the two images' embeddings (single shared code path).

    Every inference site goes through this two-image batch so distances are
    reproducible bit for bit regardless of how many pairs are scored.
    """
    e = model.embed_batch([img_a_u8, img_b_u8])
    return distance(e[0], e[1])


# --- loss -------------------------------------------------------------------

def contrastive_loss(d: float, y: int, p: ContrastiveParams) -> float:
    """Single-pair loss: alpha(1-y) d^2 + beta y max(0, m-d)^2."""
    if d < 0:
        raise ModelError(f"distance must be non-negative, got {d}")
    if y not in (0, 1):
        raise ModelError(f"indicator must be 0 or 1, got {y}")
    hinge = max(0.0, p.margin - d)
    return p.alpha * (1 - y) * d * d + p.beta * y * hinge * hinge


def _batch_loss_and_grads(
    e1: np.ndarray, e2: np.ndarray, y: np.ndarray, p: ContrastiveParams
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean loss over the batch plus gradients w.r.t. both embedding blocks."""
    dtype = e1.dtype.type
    diff = e1 - e2
    d2 = np.sum(diff * diff, axis=1)
    d = np.sqrt(d2)
    yv = y.astype(e1.dtype)
    hinge = np.maximum(dtype(0), dtype(p.margin) - d)
    losses = dtype(p.alpha) * (dtype(1) - yv) * d2 + dtype(p.beta) * yv * hinge * hinge
    b = e1.shape[0]
    loss = float(losses.mean())
    # d(loss)/d(e1): similar term 2a*diff; hinge term -2b(m-d)/d * diff (0 at d=0)
    coef = dtype(2 * p.alpha) * (dtype(1) - yv)
    active = (yv > 0) & (d > 0) & (d < dtype(p.margin))
    safe_d = np.where(d > 0, d, dtype(1))
    coef = coef - np.where(active, dtype(2 * p.beta) * (dtype(p.margin) - d) / safe_d, dtype(0))
    g = (coef / dtype(b))[:, None] * diff
    return loss, g, -g


# --- training ---------------------------------------------------------------

def train_single(
    pairs: Sequence[TrainingPair],
    arch: SiameseArchitecture,
    params: ContrastiveParams,
    opt: OptimizerConfig,
    seed: int | np.random.SeedSequence,
) -> tuple[nn.Network, list[float]]:
    """SGD training on one split; returns the network and per-epoch mean losses."""
    if not pairs:
        raise ModelError("no training pairs")
    ys = {p.y for p in pairs}
    if ys != {0, 1}:
        raise ModelError(f"training data must contain both classes, got y values {sorted(ys)}")
    rng = np.random.default_rng(seed)
    net = build_network(arch, rng)
    optimizer = nn.SGDMomentum(net.params(), lr=opt.lr, momentum=opt.momentum)
    n = len(pairs)
    s = arch.input_size
    dtype = nn.DTYPES[arch.dtype]
    # one contiguous uint8 stack per side; batches convert into a reused
    # float staging buffer ((255 - v)/255, background -> 0)
    stack_a = np.stack([p.input_a for p in pairs])
    stack_b = np.stack([p.input_b for p in pairs])
    labels = np.asarray([p.y for p in pairs])
    staging = np.empty((2 * min(opt.batch_size, n), s, s, 3), dtype=dtype)
    epoch_losses: list[float] = []
    for _epoch in range(opt.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, opt.batch_size):
            idx = order[start : start + opt.batch_size]
            b = len(idx)
            x = staging[: 2 * b]
            x[:b] = stack_a[idx]
            x[b:] = stack_b[idx]
            np.subtract(dtype(255), x, out=x)
            x /= dtype(255)
            e = net.forward(x)
            loss, g1, g2 = _batch_loss_and_grads(e[:b], e[b:], labels[idx], params)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"loss became non-finite at epoch {_epoch + 1}; lower the learning rate"
                )
            net.backward(np.concatenate([g1, g2], axis=0))
            optimizer.step(net.grads())
            total += loss * b
        epoch_losses.append(total / n)
    return net, epoch_losses


def select_threshold(
    day_scores: Sequence[tuple[float, bool]],
) -> tuple[float, float]:
    """Pick the distance threshold maximizing day-level F1.

    day_scores holds (min distance over the day's scored layers, label);
    days with no scored layers use inf and stay negative at any threshold.
    Candidates are midpoints between consecutive distinct distances plus
    sentinels below/above; ties resolve to the smallest candidate.
    """
    finite = sorted({d for d, _ in day_scores if np.isfinite(d)})
    if not finite:
        return 0.5, 0.0
    candidates = [finite[0] / 2.0 if finite[0] > 0 else 0.0]
    for lo, hi in zip(finite, finite[1:]):
        candidates.append((lo + hi) / 2.0)
    candidates.append(finite[-1] * 1.01 + 1e-9)
    best_thr, best_f1 = candidates[0], -1.0
    for thr in candidates:
        counts = ConfusionCounts.from_decisions(
            [(d < thr) for d, _ in day_scores], [lab for _, lab in day_scores]
        )
        f1 = compute_metrics(counts).f1
        if f1 > best_f1:
            best_thr, best_f1 = thr, f1
    return float(best_thr), float(best_f1)


@dataclass
class FoldResult:
    fold: int
    model: SiameseModel
    metrics: Metrics
    threshold: float
    train_days: int
    val_days: int
    epoch_losses: list[float]


@dataclass
class TrainResult:
    folds: list[FoldResult]
    best_fold: int
    fold_of_day: dict = field(default_factory=dict)  # (pair_id, date) -> fold id

    @property
    def best(self) -> FoldResult:
        return self.folds[self.best_fold]


def train(
    pairs: Sequence[TrainingPair],
    params: ContrastiveParams,
    opt: OptimizerConfig,
    arch: SiameseArchitecture = SiameseArchitecture(),
    folds: int = 5,
    seed: int = 7,
    day_labels: Optional[dict] = None,
) -> TrainResult:
    """K-fold cross-validated training over day-grouped layer pairs.

    Folds partition days (every day in exactly one validation split). Each
    fold trains from scratch, then selects its distance threshold on its
    validation days by maximizing F1 of the day decision
    "any layer distance < threshold".
    """
    if day_labels is None:
        day_labels = {}
        for p in pairs:
            day_labels[p.day_key()] = p.y == 0
    day_keys = sorted(day_labels, key=lambda k: (k[0], str(k[1])))
    labels = [day_labels[k] for k in day_keys]
    root = np.random.SeedSequence(seed)
    fold_seed, *fold_seeds = root.spawn(folds + 1)
    fold_ids = stratified_fold_ids(labels, folds, np.random.default_rng(fold_seed))
    fold_of_day = dict(zip(day_keys, fold_ids))

    by_day: dict = {}
    for p in pairs:
        by_day.setdefault(p.day_key(), []).append(p)

    results: list[FoldResult] = []
    for k in range(folds):
        train_pairs = [p for p in pairs if fold_of_day[p.day_key()] != k]
        if not train_pairs or {p.y for p in train_pairs} != {0, 1}:
            raise ModelError(f"fold {k}: training split does not contain both classes")
        net, losses = train_single(train_pairs, arch, params, opt, fold_seeds[k])
        model = SiameseModel(arch, net, None, seed, {"fold": k})
        day_scores = []
        val_keys = [dk for dk in day_keys if fold_of_day[dk] == k]
        for dk in val_keys:
            dists = [
                score_pair(model, p.input_a, p.input_b) for p in by_day.get(dk, [])
            ]
            day_scores.append((min(dists) if dists else float("inf"), day_labels[dk]))
        thr, _ = select_threshold(day_scores)
        model.distance_threshold = thr
        counts = ConfusionCounts.from_decisions(
            [d < thr for d, _ in day_scores], [lab for _, lab in day_scores]
        )
        metrics = compute_metrics(counts)
        results.append(
            FoldResult(k, model, metrics, thr, len(day_keys) - len(val_keys), len(val_keys), losses)
        )
    best = max(range(folds), key=lambda k: (results[k].metrics.f1, -k))
    return TrainResult(results, best, fold_of_day)


# --- gradient verification --------------------------------------------------

def check_gradients(
    model: SiameseModel,
    batch: Sequence[TrainingPair],
    params: ContrastiveParams,
    step: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Verifies the full differentiation chain (loss -> embeddings -> every
    weight). Use a float64 toy model; float32 finite differences drown in
    rounding error.
    """
    if model.arch.dtype != "float64":
        raise ModelError("gradient checks require a float64 model")
    net = model.net
    xa = to_network_batch([p.input_a for p in batch], model.arch)
    xb = to_network_batch([p.input_b for p in batch], model.arch)
    y = np.asarray([p.y for p in batch])
    x = np.concatenate([xa, xb], axis=0)
    b = len(batch)

    def loss_fn() -> float:
        e = net.forward(x)
        loss, _, _ = _batch_loss_and_grads(e[:b], e[b:], y, params)
        return loss

    e = net.forward(x)
    _, g1, g2 = _batch_loss_and_grads(e[:b], e[b:], y, params)
    net.backward(np.concatenate([g1, g2], axis=0))
    analytic = [g.copy() for g in net.grads()]
    numeric = nn.numeric_gradient(loss_fn, net.params(), step=step)
    return nn.max_relative_error(analytic, numeric)
