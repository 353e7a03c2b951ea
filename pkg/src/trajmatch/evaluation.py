"""Classification metrics, cross-validation bookkeeping, timing, ablation.

Zero-denominator conventions: precision / recall / F1 / MCC all fall back
to 0. Weighted metrics are support-weighted combinations of the per-class
metrics; fold averages weight each fold's classes by their support within
the fold and then average across folds.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from trajmatch.errors import PipelineError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise PipelineError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @staticmethod
    def from_decisions(decisions: Sequence[bool], labels: Sequence[bool]) -> "ConfusionCounts":
        if len(decisions) != len(labels):
            raise PipelineError("decisions and labels differ in length")
        tp = fp = tn = fn = 0
        for d, y in zip(decisions, labels):
            if d and y:
                tp += 1
            elif d and not y:
                fp += 1
            elif not d and y:
                fn += 1
            else:
                tn += 1
        return ConfusionCounts(tp, fp, tn, fn)

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn
        )


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    accuracy: float
    f1: float
    mcc: float
    exec_time_seconds: float = 0.0

    def as_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "accuracy": self.accuracy,
            "f1": self.f1,
            "mcc": self.mcc,
            "exec_time_seconds": self.exec_time_seconds,
        }


def _safe_div(num: float, den: float) -> float:
    return num / den if den else 0.0


def mcc_value(c: ConfusionCounts) -> float:
    num = c.tp * c.tn - c.fp * c.fn
    den = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    if den == 0:
        return 0.0
    return num / math.sqrt(den)


def compute_metrics(counts: ConfusionCounts, exec_time_seconds: float = 0.0) -> Metrics:
    """Positive-class precision/recall/F1, accuracy and MCC."""
    if counts.total == 0:
        raise PipelineError("cannot compute metrics over zero instances")
    precision = _safe_div(counts.tp, counts.tp + counts.fp)
    recall = _safe_div(counts.tp, counts.tp + counts.fn)
    accuracy = (counts.tp + counts.tn) / counts.total
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return Metrics(precision, recall, accuracy, f1, mcc_value(counts), exec_time_seconds)


def per_class_metrics(counts: ConfusionCounts) -> dict[str, dict[str, float]]:
    """Precision/recall/F1 for each class treated as positive, with supports."""
    pos = compute_metrics(counts)
    swapped = ConfusionCounts(tp=counts.tn, fp=counts.fn, tn=counts.tp, fn=counts.fp)
    neg = compute_metrics(swapped)
    return {
        "positive": {
            "precision": pos.precision,
            "recall": pos.recall,
            "f1": pos.f1,
            "support": counts.tp + counts.fn,
        },
        "negative": {
            "precision": neg.precision,
            "recall": neg.recall,
            "f1": neg.f1,
            "support": counts.tn + counts.fp,
        },
    }


def compute_weighted_metrics(counts: ConfusionCounts, exec_time_seconds: float = 0.0) -> Metrics:
    """Support-weighted average of per-class precision/recall/F1."""
    if counts.total == 0:
        raise PipelineError("cannot compute metrics over zero instances")
    per = per_class_metrics(counts)
    n = counts.total

    def weighted(key: str) -> float:
        return sum(cls[key] * cls["support"] for cls in per.values()) / n

    accuracy = (counts.tp + counts.tn) / n
    return Metrics(
        weighted("precision"), weighted("recall"), accuracy, weighted("f1"),
        mcc_value(counts), exec_time_seconds,
    )


# --- cross-validation bookkeeping -------------------------------------------

def stratified_fold_ids(
    labels: Sequence[bool], folds: int, rng: np.random.Generator
) -> list[int]:
    """Assign each instance to one of `folds` validation folds, stratified.

    Instances of each class are shuffled and dealt round-robin, so every
    instance lands in exactly one fold and class balance is preserved.
    """
    if folds < 2:
        raise PipelineError(f"need at least 2 folds, got {folds}")
    ids = [0] * len(labels)
    for cls in (True, False):
        members = [i for i, lab in enumerate(labels) if bool(lab) == cls]
        members = list(rng.permutation(members)) if members else []
        for j, i in enumerate(members):
            ids[int(i)] = j % folds
    return ids


# --- timing harness ----------------------------------------------------------

@dataclass
class TimedResult:
    value: object
    seconds: float


def timed(fn: Callable, *args, **kwargs) -> TimedResult:
    t0 = time.perf_counter()
    value = fn(*args, **kwargs)
    return TimedResult(value, time.perf_counter() - t0)


def measure_render_times(
    pair_days,
    layer_counts: Sequence[int],
    canvas=None,
    encode_png: bool = True,
) -> list[dict]:
    """Per-layer-count image generation timing (count, per-image, total).

    Renders every image of every day for each layer count, optionally
    including lossless PNG encoding, and reports mean per-image plus total
    wall time on a monotonic clock.
    """
    import io as _io

    from trajmatch.raster import CanvasSpec, LayerSpec, render_pair_day

    canvas = canvas or CanvasSpec()
    rows = []
    for l in layer_counts:
        spec = LayerSpec(l)
        n_images = 0
        t0 = time.perf_counter()
        for pd in pair_days:
            for img_a, img_b in render_pair_day(pd, spec, canvas):
                for img in (img_a, img_b):
                    n_images += 1
                    if encode_png:
                        from PIL import Image

                        buf = _io.BytesIO()
                        Image.fromarray(img.pixels, mode="RGB").save(buf, format="PNG")
        elapsed = time.perf_counter() - t0
        rows.append(
            {
                "num_layers": l,
                "num_images": n_images,
                "time_per_image_s": elapsed / n_images if n_images else 0.0,
                "total_time_s": elapsed,
            }
        )
    return rows


# --- ablation ----------------------------------------------------------------

@dataclass
class AblationRow:
    variant: str
    num_layers: int
    metrics: Metrics
    weighted: Metrics
    fold_metrics: list[Metrics] = field(default_factory=list)
    error: Optional[str] = None


def run_ablation(
    pair_days,
    layer_counts: Sequence[int] = (1, 5, 24, 48),
    variants: Optional[Sequence] = None,
    seed: int = 7,
    contrastive=None,
    optimizer=None,
    arch=None,
    canvas=None,
    folds: int = 5,
    crop_pad: int = 2,
) -> dict:
    """Train and evaluate every (variant, layer count) combination.

    Returns a report dict with one row per combination: pooled day-level
    metrics, weighted metrics, and execution time covering image
    generation, stage machinery and classification (training excluded).
    Combinations that cannot be trained are reported with a diagnostic and
    skipped.
    """
    from trajmatch.pipeline import PipelineVariant, run_pipeline_cv
    from trajmatch.raster import CanvasSpec
    from trajmatch.siamese import ContrastiveParams, OptimizerConfig, SiameseArchitecture

    variants = list(variants) if variants is not None else list(PipelineVariant)
    contrastive = contrastive or ContrastiveParams()
    optimizer = optimizer or OptimizerConfig()
    arch = arch or SiameseArchitecture()
    canvas = canvas or CanvasSpec()

    rows: list[AblationRow] = []
    for variant in variants:
        for l in layer_counts:
            try:
                cv = run_pipeline_cv(
                    pair_days,
                    variant,
                    num_layers=l,
                    canvas=canvas,
                    contrastive=contrastive,
                    optimizer=optimizer,
                    arch=arch,
                    folds=folds,
                    seed=seed,
                    crop_pad=crop_pad,
                )
            except Exception as exc:  # row skipped, run continues
                rows.append(
                    AblationRow(
                        variant.value,
                        l,
                        Metrics(0, 0, 0, 0, 0),
                        Metrics(0, 0, 0, 0, 0),
                        error=f"{type(exc).__name__}: {exc}",
                    )
                )
                continue
            rows.append(
                AblationRow(
                    variant.value,
                    l,
                    cv.pooled,
                    cv.pooled_weighted,
                    [f.metrics for f in cv.train_result.folds],
                )
            )
    return {
        "rows": [
            {
                "variant": r.variant,
                "num_layers": r.num_layers,
                "metrics": r.metrics.as_dict(),
                "weighted": r.weighted.as_dict(),
                "fold_f1": [m.f1 for m in r.fold_metrics],
                "error": r.error,
            }
            for r in rows
        ],
        "seed": seed,
        "folds": folds,
        "weighting": "per-class support within fold, averaged across folds via pooled counts",
    }


def format_ablation_table(report: dict) -> str:
    """Fixed-width text table of the ablation report."""
    header = (
        f"{'variant':<16}{'layers':>7}{'prec':>8}{'recall':>8}{'acc':>8}"
        f"{'f1':>8}{'mcc':>8}{'time_s':>10}"
    )
    lines = [header, "-" * len(header)]
    for row in report["rows"]:
        if row.get("error"):
            lines.append(f"{row['variant']:<16}{row['num_layers']:>7}  skipped: {row['error']}")
            continue
        m = row["weighted"]
        lines.append(
            f"{row['variant']:<16}{row['num_layers']:>7}"
            f"{m['precision']:>8.3f}{m['recall']:>8.3f}{m['accuracy']:>8.3f}"
            f"{m['f1']:>8.3f}{m['mcc']:>8.3f}{m['exec_time_seconds']:>10.3f}"
        )
    return "\n".join(lines)
