"""Minimal two-layer GRU baseline over raw paired coordinates.

Each labeled day becomes one sequence: both members' fixes are snapped to a
shared time grid and only grid slots where both members have a fix survive,
so the features are (lat_a, lon_a, lat_b, lon_b) per common timestep,
standardized per feature on the training split. Training is SGD with
momentum, 5-fold CV, a 50-epoch cap and early stopping on validation loss.
All math runs in float64; the model is small.
"""

from __future__ import annotations

import datetime
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from trajmatch.errors import ModelError, TrainingDivergedError
from trajmatch.evaluation import (
    ConfusionCounts,
    Metrics,
    compute_metrics,
    compute_weighted_metrics,
    stratified_fold_ids,
)
from trajmatch.ingest import PairDay

_PARAM_KEYS = ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wn", "Un", "bn")


@dataclass
class SequenceInstance:
    pair_id: str
    local_date: Optional[datetime.date]
    features: np.ndarray  # [T, 4] raw (lat_a, lon_a, lat_b, lon_b)
    label: bool

    @property
    def length(self) -> int:
        return int(self.features.shape[0])


def build_sequences(
    pair_days: Sequence[PairDay],
    grid_period_s: int = 60,
) -> list[SequenceInstance]:
    """Align both members on a shared time grid; keep slots where both have data.

    A grid slot takes the member's nearest fix within half a period (no
    interpolation). Days with no common slot yield a zero-length instance;
    callers treat those as negative and the network never sees them.
    """
    period_ms = grid_period_s * 1000
    half = period_ms // 2
    out = []
    for pd in pair_days:
        slot_maps = []
        for trace in (pd.trace_a, pd.trace_b):
            slots: dict[int, tuple[int, float, float]] = {}
            for s in trace.samples:
                t = s.ms_of_day
                slot = (t + half) // period_ms
                err = abs(t - slot * period_ms)
                prev = slots.get(slot)
                if prev is None or err < prev[0]:
                    slots[slot] = (err, s.lat, s.lon)
            slot_maps.append(slots)
        common = sorted(set(slot_maps[0]) & set(slot_maps[1]))
        feats = np.asarray(
            [
                [slot_maps[0][k][1], slot_maps[0][k][2], slot_maps[1][k][1], slot_maps[1][k][2]]
                for k in common
            ],
            dtype=np.float64,
        ).reshape(len(common), 4)
        out.append(SequenceInstance(pd.pair_id, pd.local_date, feats, bool(pd.label)))
    return out


@dataclass(frozen=True)
class GRUConfig:
    hidden: int = 32
    layers: int = 2
    dropout: float = 0.2
    epochs: int = 50
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    patience: int = 5
    max_len: int = 512
    grad_clip: float = 5.0


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _init_layer(in_dim: int, hidden: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    def mat(rows: int, cols: int) -> np.ndarray:
        bound = 1.0 / math.sqrt(cols)
        return rng.uniform(-bound, bound, size=(rows, cols))

    return {
        "Wz": mat(hidden, in_dim), "Uz": mat(hidden, hidden), "bz": np.zeros(hidden),
        "Wr": mat(hidden, in_dim), "Ur": mat(hidden, hidden), "br": np.zeros(hidden),
        "Wn": mat(hidden, in_dim), "Un": mat(hidden, hidden), "bn": np.zeros(hidden),
    }


class GRUModel:
    def __init__(self, input_dim: int, config: GRUConfig, rng: np.random.Generator):
        self.config = config
        self.input_dim = input_dim
        self.layers = [
            _init_layer(input_dim if i == 0 else config.hidden, config.hidden, rng)
            for i in range(config.layers)
        ]
        bound = 1.0 / math.sqrt(config.hidden)
        self.wo = rng.uniform(-bound, bound, size=config.hidden)
        self.bo = np.zeros(1)
        self.feature_mean = np.zeros(input_dim)
        self.feature_std = np.ones(input_dim)

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend(layer[k] for k in _PARAM_KEYS)
        out.extend([self.wo, self.bo])
        return out

    def standardize(self, feats: np.ndarray) -> np.ndarray:
        return (feats - self.feature_mean) / self.feature_std


def _layer_forward(layer: dict, hidden: int, x: np.ndarray, mask: np.ndarray):
    """One GRU layer over x [N,T,D] with mask [N,T]; masked steps carry h."""
    n, t_len, _ = x.shape
    h = np.zeros((n, hidden))
    outs = np.zeros((n, t_len, hidden))
    caches = []
    for t in range(t_len):
        xt = x[:, t, :]
        m = mask[:, t][:, None]
        z = _sigmoid(xt @ layer["Wz"].T + h @ layer["Uz"].T + layer["bz"])
        r = _sigmoid(xt @ layer["Wr"].T + h @ layer["Ur"].T + layer["br"])
        hU = h @ layer["Un"].T
        cand = np.tanh(xt @ layer["Wn"].T + r * hU + layer["bn"])
        h_new = (1.0 - z) * cand + z * h
        h_next = m * h_new + (1.0 - m) * h
        caches.append((xt, h, z, r, cand, hU, m))
        outs[:, t, :] = h_next
        h = h_next
    return outs, h, caches


def _layer_backward(layer: dict, douts: np.ndarray, caches: list, in_dim: int):
    """BPTT through one layer. douts [N,T,H] are gradients w.r.t. outs."""
    n, t_len, hidden = douts.shape
    grads = {k: np.zeros_like(layer[k]) for k in _PARAM_KEYS}
    dx = np.zeros((n, t_len, in_dim))
    dh_carry = np.zeros((n, hidden))
    for t in range(t_len - 1, -1, -1):
        xt, h_prev, z, r, cand, hU, m = caches[t]
        dh = douts[:, t, :] + dh_carry
        dh_new = dh * m
        dh_prev = dh * (1.0 - m)
        gz = dh_new * (h_prev - cand)
        gn = dh_new * (1.0 - z)
        dh_prev = dh_prev + dh_new * z
        da_n = gn * (1.0 - cand * cand)
        grads["Wn"] += da_n.T @ xt
        grads["bn"] += da_n.sum(axis=0)
        dxt = da_n @ layer["Wn"]
        d_hU = da_n * r
        grads["Un"] += d_hU.T @ h_prev
        dh_prev = dh_prev + d_hU @ layer["Un"]
        da_r = (da_n * hU) * r * (1.0 - r)
        grads["Wr"] += da_r.T @ xt
        grads["br"] += da_r.sum(axis=0)
        dxt = dxt + da_r @ layer["Wr"]
        grads["Ur"] += da_r.T @ h_prev
        dh_prev = dh_prev + da_r @ layer["Ur"]
        da_z = gz * z * (1.0 - z)
        grads["Wz"] += da_z.T @ xt
        grads["bz"] += da_z.sum(axis=0)
        dxt = dxt + da_z @ layer["Wz"]
        grads["Uz"] += da_z.T @ h_prev
        dh_prev = dh_prev + da_z @ layer["Uz"]
        dx[:, t, :] = dxt
        dh_carry = dh_prev
    return grads, dx


def forward_batch(
    model: GRUModel,
    x: np.ndarray,
    mask: np.ndarray,
    train: bool = False,
    drop_rng: Optional[np.random.Generator] = None,
):
    """Probabilities [N] plus everything backward_batch needs."""
    hidden = model.config.hidden
    layer_inputs = []
    layer_caches = []
    drop_masks: list[Optional[np.ndarray]] = []
    cur = x
    h_last = None
    for li, layer in enumerate(model.layers):
        layer_inputs.append(cur)
        outs, h_last, caches = _layer_forward(layer, hidden, cur, mask)
        layer_caches.append(caches)
        if li < len(model.layers) - 1:
            if train and model.config.dropout > 0.0:
                if drop_rng is None:
                    raise ModelError("training forward requires a dropout rng")
                keep = 1.0 - model.config.dropout
                dm = (drop_rng.random(outs.shape) < keep).astype(np.float64) / keep
                outs = outs * dm
                drop_masks.append(dm)
            else:
                drop_masks.append(None)
        cur = outs
    logits = h_last @ model.wo + model.bo[0]
    probs = _sigmoid(logits)
    cache = (layer_inputs, layer_caches, drop_masks, h_last, probs, mask.shape[1])
    return probs, cache


def backward_batch(model: GRUModel, cache, y: np.ndarray) -> list[np.ndarray]:
    """Gradients of mean BCE loss, ordered like model.params()."""
    layer_inputs, layer_caches, drop_masks, h_last, probs, t_len = cache
    n = len(y)
    dlogit = (probs - y) / n
    dwo = h_last.T @ dlogit
    dbo = np.asarray([dlogit.sum()])
    dh_last = dlogit[:, None] * model.wo[None, :]
    douts = np.zeros((n, t_len, model.config.hidden))
    if t_len > 0:
        douts[:, t_len - 1, :] = dh_last
    grads_per_layer = []
    for li in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[li]
        in_dim = model.input_dim if li == 0 else model.config.hidden
        grads, dx = _layer_backward(layer, douts, layer_caches[li], in_dim)
        grads_per_layer.append(grads)
        if li > 0:
            dm = drop_masks[li - 1]
            douts = dx if dm is None else dx * dm
    grads_per_layer.reverse()
    out = []
    for grads in grads_per_layer:
        out.extend(grads[k] for k in _PARAM_KEYS)
    out.extend([dwo, dbo])
    return out


def bce_loss(probs: np.ndarray, y: np.ndarray) -> float:
    p = np.clip(probs, 1e-12, 1.0 - 1e-12)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def _pack(instances: Sequence[SequenceInstance], model: GRUModel, cap: int):
    """Standardize, truncate to cap and zero-pad into [N,cap,4] + mask."""
    n = len(instances)
    x = np.zeros((n, cap, 4))
    mask = np.zeros((n, cap))
    for i, inst in enumerate(instances):
        t = min(inst.length, cap)
        if t > 0:
            x[i, :t] = model.standardize(inst.features[:t])
            mask[i, :t] = 1.0
    return x, mask


def gru_forward(model: GRUModel, instance: SequenceInstance) -> float:
    """Inference probability for one instance (dropout disabled)."""
    if instance.length == 0:
        raise ModelError("cannot run the GRU on a zero-length sequence")
    x, mask = _pack([instance], model, min(instance.length, model.config.max_len))
    probs, _ = forward_batch(model, x, mask, train=False)
    return float(probs[0])


def predict_batch(model: GRUModel, instances: Sequence[SequenceInstance]) -> np.ndarray:
    """Probabilities for many instances; zero-length sequences map to 0.0."""
    probs = np.zeros(len(instances))
    nonzero = [i for i, inst in enumerate(instances) if inst.length > 0]
    if nonzero:
        cap = min(max(instances[i].length for i in nonzero), model.config.max_len)
        x, mask = _pack([instances[i] for i in nonzero], model, cap)
        p, _ = forward_batch(model, x, mask, train=False)
        probs[nonzero] = p
    return probs


class EarlyStopper:
    """Stop after `patience` consecutive epochs without improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.stale = 0

    def update(self, val_loss: float) -> bool:
        """Record an epoch's validation loss; True means stop now."""
        if val_loss < self.best:
            self.best = val_loss
            self.stale = 0
            return False
        self.stale += 1
        return self.stale >= self.patience


@dataclass
class GRUFoldResult:
    fold: int
    model: GRUModel
    metrics: Metrics
    epochs_run: int
    val_loss: float


@dataclass
class GRUTrainResult:
    folds: list[GRUFoldResult]
    fold_of_instance: list[int]
    pooled: Metrics
    pooled_weighted: Metrics
    counts: ConfusionCounts


def _clip_grads(grads: list[np.ndarray], max_norm: float) -> None:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if total > max_norm > 0:
        scale = max_norm / total
        for g in grads:
            g *= scale


def train_fold(
    train_insts: Sequence[SequenceInstance],
    val_insts: Sequence[SequenceInstance],
    config: GRUConfig,
    seed: int | np.random.SeedSequence,
) -> tuple[GRUModel, int, float]:
    """Train one fold; returns (best model, epochs run, best val loss)."""
    trainable = [i for i in train_insts if i.length > 0]
    if not trainable or len({i.label for i in trainable}) != 2:
        raise ModelError("GRU training split must contain both classes")
    rng = np.random.default_rng(seed)
    model = GRUModel(4, config, rng)
    all_feats = np.concatenate([i.features for i in trainable], axis=0)
    model.feature_mean = all_feats.mean(axis=0)
    std = all_feats.std(axis=0)
    model.feature_std = np.where(std > 1e-12, std, 1.0)

    cap = min(config.max_len, max(i.length for i in trainable))
    params = model.params()
    velocity = [np.zeros_like(p) for p in params]
    val_eval = [i for i in val_insts if i.length > 0]
    stopper = EarlyStopper(config.patience)
    best_params = [p.copy() for p in params]
    best_val = math.inf
    epochs_run = 0
    n = len(trainable)
    for epoch in range(config.epochs):
        epochs_run = epoch + 1
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = [trainable[i] for i in order[start : start + config.batch_size]]
            x, mask = _pack(batch, model, cap)
            y = np.asarray([float(i.label) for i in batch])
            probs, cache = forward_batch(model, x, mask, train=True, drop_rng=rng)
            if not np.all(np.isfinite(probs)):
                raise TrainingDivergedError(f"GRU diverged at epoch {epoch + 1}")
            grads = backward_batch(model, cache, y)
            _clip_grads(grads, config.grad_clip)
            for p, g, v in zip(params, grads, velocity):
                v *= config.momentum
                v -= config.lr * g
                p += v
        if val_eval:
            val_probs = predict_batch(model, val_eval)
            val_loss = bce_loss(val_probs, np.asarray([float(i.label) for i in val_eval]))
        else:
            val_loss = 0.0
        if val_loss < best_val:
            best_val = val_loss
            best_params = [p.copy() for p in params]
        if stopper.update(val_loss):
            break
    for p, bp in zip(params, best_params):
        p[...] = bp
    return model, epochs_run, best_val


def gru_train(
    instances: Sequence[SequenceInstance],
    config: GRUConfig = GRUConfig(),
    folds: int = 5,
    seed: int = 7,
) -> GRUTrainResult:
    """5-fold CV training; every instance is classified once by its fold."""
    labels = [inst.label for inst in instances]
    root = np.random.SeedSequence(seed)
    fold_seed, *fold_seeds = root.spawn(folds + 1)
    fold_ids = stratified_fold_ids(labels, folds, np.random.default_rng(fold_seed))
    results = []
    decisions = [False] * len(instances)
    for k in range(folds):
        train_insts = [inst for inst, f in zip(instances, fold_ids) if f != k]
        val_idx = [i for i, f in enumerate(fold_ids) if f == k]
        val_insts = [instances[i] for i in val_idx]
        model, epochs_run, val_loss = train_fold(train_insts, val_insts, config, fold_seeds[k])
        probs = predict_batch(model, val_insts)
        fold_decisions = probs > 0.5
        for i, d in zip(val_idx, fold_decisions):
            decisions[i] = bool(d)
        counts = ConfusionCounts.from_decisions(
            list(fold_decisions), [inst.label for inst in val_insts]
        )
        results.append(GRUFoldResult(k, model, compute_metrics(counts), epochs_run, val_loss))
    counts = ConfusionCounts.from_decisions(decisions, labels)
    return GRUTrainResult(
        results,
        fold_ids,
        compute_metrics(counts),
        compute_weighted_metrics(counts),
        counts,
    )


def check_gradients(
    model: GRUModel,
    instances: Sequence[SequenceInstance],
    step: float = 1e-5,
) -> float:
    """Max relative error of BPTT gradients vs central differences (no dropout)."""
    from trajmatch import nn

    cap = min(model.config.max_len, max(i.length for i in instances))
    x, mask = _pack(instances, model, cap)
    y = np.asarray([float(i.label) for i in instances])

    def loss_fn() -> float:
        probs, _ = forward_batch(model, x, mask, train=False)
        return bce_loss(probs, y)

    probs, cache = forward_batch(model, x, mask, train=False)
    analytic = backward_batch(model, cache, y)
    numeric = nn.numeric_gradient(loss_fn, model.params(), step=step)
    return nn.max_relative_error(analytic, numeric)
