"""Per-day classification pipeline with ablation variants.

Stage wiring per variant (generation always runs first, evaluation last):

    baseline        generate -> evaluate every layer
    overlap         generate -> localize -> overlap gate -> evaluate
    overlap-crop    generate -> localize -> crop -> overlap gate -> evaluate
    overlap-filter  generate -> filter -> localize -> overlap gate -> evaluate
    entire          generate -> filter -> localize -> crop -> overlap gate -> evaluate

Layers are evaluated in ascending index; the first positive layer decides
the day. An exhaustive mode scores every layer instead (used for routine
analysis and for equivalence oracles).
"""

from __future__ import annotations

import datetime
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from trajmatch import quality
from trajmatch.errors import PipelineError
from trajmatch.evaluation import (
    ConfusionCounts,
    Metrics,
    compute_metrics,
    compute_weighted_metrics,
)
from trajmatch.ingest import PairDay
from trajmatch.localize import BoundingBox, crop, locate
from trajmatch.raster import (
    CanvasSpec,
    LayerImage,
    LayerSpec,
    blank_canvas,
    compute_pair_extent,
    count_colored,
    render_layer,
)
from trajmatch.siamese import (
    ContrastiveParams,
    OptimizerConfig,
    SiameseArchitecture,
    SiameseModel,
    TrainingPair,
    TrainResult,
    resize_nearest,
    score_pair,
    train,
)


class PipelineVariant(Enum):
    BASELINE = "baseline"
    OVERLAP = "overlap"
    OVERLAP_CROP = "overlap-crop"
    OVERLAP_FILTER = "overlap-filter"
    ENTIRE = "entire"

    @property
    def uses_filter(self) -> bool:
        return self in (PipelineVariant.OVERLAP_FILTER, PipelineVariant.ENTIRE)

    @property
    def uses_overlap(self) -> bool:
        return self is not PipelineVariant.BASELINE

    @property
    def uses_crop(self) -> bool:
        return self in (PipelineVariant.OVERLAP_CROP, PipelineVariant.ENTIRE)


@dataclass
class StageCounters:
    layers_total: int = 0
    rendered: int = 0
    filter_checks: int = 0
    filtered_out: int = 0
    empty_skipped: int = 0
    overlap_checks: int = 0
    overlap_rejected: int = 0
    crop_ops: int = 0
    network_invocations: int = 0

    def as_dict(self) -> dict:
        return dict(vars(self))

    def __iadd__(self, other: "StageCounters") -> "StageCounters":
        for key, val in vars(other).items():
            setattr(self, key, getattr(self, key) + val)
        return self


@dataclass
class Verdict:
    pair_id: str
    local_date: Optional[datetime.date]
    decision: bool
    matched_layer: Optional[int]
    distance: Optional[float]
    layers_examined: int
    counters: StageCounters = field(default_factory=StageCounters)
    layer_outcomes: Optional[list] = None  # exhaustive mode: (layer, status, distance)

    def as_record(self) -> dict:
        return {
            "record": "verdict",
            "pair_id": self.pair_id,
            "local_date": self.local_date.isoformat() if self.local_date else None,
            "decision": self.decision,
            "matched_layer": self.matched_layer,
            "distance": self.distance,
            "layers_examined": self.layers_examined,
            "counters": self.counters.as_dict(),
        }


def boxes_overlap(a: BoundingBox, b: BoundingBox) -> bool:
    """True iff the boxes intersect with positive area (edge touch excluded)."""
    if a.empty or b.empty:
        raise PipelineError("boxes_overlap requires non-empty boxes")
    return min(a.x1, b.x1) > max(a.x0, b.x0) and min(a.y1, b.y1) > max(a.y0, b.y0)


# --- per-day candidate preparation -------------------------------------------

SCORED = "scored"
EMPTY = "empty"
FILTERED = "filtered"
NO_OVERLAP = "no_overlap"


@dataclass
class LayerCandidate:
    layer_index: int
    status: str
    count_a: int
    count_b: int
    window: tuple[int, int]
    box_a: Optional[BoundingBox] = None
    box_b: Optional[BoundingBox] = None
    input_a: Optional[np.ndarray] = None  # uint8 [S,S,3], network sized
    input_b: Optional[np.ndarray] = None


@dataclass
class PipelineSpecs:
    layer_spec: LayerSpec
    canvas: CanvasSpec = CanvasSpec()
    crop_pad: int = 2
    input_size: int = 128
    max_gap_ms: Optional[int] = None
    filter_threshold: Optional[float] = None  # required by filtering variants


def _network_input(image: LayerImage, box: Optional[BoundingBox], specs: PipelineSpecs,
                   do_crop: bool, counters: StageCounters) -> np.ndarray:
    if do_crop and box is not None and not box.empty:
        counters.crop_ops += 1
        image = crop(image, box, specs.crop_pad)
    return resize_nearest(image.pixels, specs.input_size)


def prepare_day(
    pair_day: PairDay, variant: PipelineVariant, specs: PipelineSpecs,
    counters: Optional[StageCounters] = None,
) -> list[LayerCandidate]:
    """Render a day's layers and run the variant's elimination stages.

    Returns one candidate per layer; candidates with status "scored" carry
    the exact network inputs the evaluator would see.
    """
    if variant.uses_filter and specs.filter_threshold is None:
        raise PipelineError(f"{variant.value} requires a filter threshold (corpus statistics)")
    counters = counters if counters is not None else StageCounters()
    spec = specs.layer_spec
    counters.layers_total += spec.num_layers
    blank_input: Optional[np.ndarray] = None
    out: list[LayerCandidate] = []
    for i, window in enumerate(spec.windows(), start=1):
        extent = compute_pair_extent(pair_day, window)
        img_a = render_layer(pair_day.trace_a, window, extent, specs.canvas,
                             pair_day.pair_id, i, specs.max_gap_ms)
        img_b = render_layer(pair_day.trace_b, window, extent, specs.canvas,
                             pair_day.pair_id, i, specs.max_gap_ms)
        counters.rendered += 2
        ca, cb = img_a.colored_pixel_count, img_b.colored_pixel_count
        cand = LayerCandidate(i, SCORED, ca, cb, window)

        if variant.uses_filter:
            counters.filter_checks += 1
            thr = specs.filter_threshold
            if ca < thr or cb < thr:
                cand.status = FILTERED
                counters.filtered_out += 1
                out.append(cand)
                continue

        if variant.uses_overlap:
            if ca == 0 or cb == 0:
                cand.status = EMPTY
                counters.empty_skipped += 1
                out.append(cand)
                continue
            cand.box_a, cand.box_b = locate(img_a), locate(img_b)
            counters.overlap_checks += 1
            if not boxes_overlap(cand.box_a, cand.box_b):
                cand.status = NO_OVERLAP
                counters.overlap_rejected += 1
                out.append(cand)
                continue

        if variant is PipelineVariant.BASELINE and ca == 0 and cb == 0:
            # all blank canvases are byte-identical; share one input
            if blank_input is None:
                blank_input = resize_nearest(blank_canvas(specs.canvas), specs.input_size)
            cand.input_a = blank_input
            cand.input_b = blank_input
        else:
            cand.input_a = _network_input(img_a, cand.box_a, specs, variant.uses_crop, counters)
            cand.input_b = _network_input(img_b, cand.box_b, specs, variant.uses_crop, counters)
        out.append(cand)
    return out


def classify_day(
    pair_day: PairDay,
    variant: PipelineVariant,
    model: SiameseModel,
    specs: PipelineSpecs,
    candidates: Optional[Sequence[LayerCandidate]] = None,
    exhaustive: bool = False,
) -> Verdict:
    """Classify one day; short-circuits on the first positive layer.

    layers_examined counts layers that survived elimination and reached the
    overlap gate or the network, up to and including the deciding layer.
    In exhaustive mode every surviving layer is scored and all
    (layer, status, distance) outcomes are attached to the verdict.
    """
    if model.distance_threshold is None:
        raise PipelineError("model has no distance threshold; train or set one first")
    counters = StageCounters()
    if candidates is None:
        candidates = prepare_day(pair_day, variant, specs, counters)
    else:
        counters.layers_total += specs.layer_spec.num_layers
    outcomes = []
    decision = False
    matched: Optional[int] = None
    matched_distance: Optional[float] = None
    examined = 0
    for cand in candidates:
        if decision and not exhaustive:
            break
        if cand.status in (FILTERED, EMPTY):
            outcomes.append((cand.layer_index, cand.status, None))
            continue
        if not decision:
            examined += 1
        if cand.status == NO_OVERLAP:
            outcomes.append((cand.layer_index, cand.status, None))
            continue
        counters.network_invocations += 1
        d = score_pair(model, cand.input_a, cand.input_b)
        outcomes.append((cand.layer_index, SCORED, d))
        if not decision and d < model.distance_threshold:
            decision = True
            matched = cand.layer_index
            matched_distance = d
    return Verdict(
        pair_day.pair_id,
        pair_day.local_date,
        decision,
        matched,
        matched_distance,
        examined,
        counters,
        outcomes if exhaustive else None,
    )


# --- corpus preparation and cross-validated runs -----------------------------

@dataclass
class CorpusPrep:
    variant: PipelineVariant
    specs: PipelineSpecs
    days: list[PairDay]
    candidates: list[list[LayerCandidate]]
    counters: StageCounters
    filter_stats: Optional[quality.FilterStats] = None

    def day_key(self, idx: int) -> tuple[str, datetime.date]:
        pd = self.days[idx]
        return (pd.pair_id, pd.local_date)


def prepare_corpus(
    pair_days: Sequence[PairDay],
    variant: PipelineVariant,
    specs: PipelineSpecs,
) -> CorpusPrep:
    """Render and stage every day once; resolves the filter threshold.

    When the variant filters and no threshold was supplied, corpus
    statistics over every rendered image (including empty layers) pick it:
    lower quartile for single-layer sets, median otherwise.
    """
    specs_resolved = specs
    stats = None
    if variant.uses_filter and specs.filter_threshold is None:
        counts: list[int] = []
        for pd in pair_days:
            for window in specs.layer_spec.windows():
                extent = compute_pair_extent(pd, window)
                for trace in (pd.trace_a, pd.trace_b):
                    img = render_layer(trace, window, extent, specs.canvas)
                    counts.append(img.colored_pixel_count)
        stats = quality.stats_from_counts(counts)
        threshold = quality.default_threshold(stats, specs.layer_spec.num_layers)
        specs_resolved = PipelineSpecs(
            layer_spec=specs.layer_spec,
            canvas=specs.canvas,
            crop_pad=specs.crop_pad,
            input_size=specs.input_size,
            max_gap_ms=specs.max_gap_ms,
            filter_threshold=threshold,
        )
    counters = StageCounters()
    days = list(pair_days)
    candidates = [prepare_day(pd, variant, specs_resolved, counters) for pd in days]
    return CorpusPrep(variant, specs_resolved, days, candidates, counters, stats)


def build_training_pairs(prep: CorpusPrep) -> list[TrainingPair]:
    """Layer pairs that would reach the network, labeled from their day.

    Positive days contribute their surviving (overlapping, where the
    variant localizes) layer pairs with y=0; negative days contribute
    theirs with y=1. Days without labels are rejected.
    """
    pairs: list[TrainingPair] = []
    for pd, cands in zip(prep.days, prep.candidates):
        if pd.label is None:
            raise PipelineError(f"day {pd.pair_id}/{pd.local_date} has no label")
        y = 0 if pd.label else 1
        for cand in cands:
            if cand.status == SCORED:
                pairs.append(
                    TrainingPair(cand.input_a, cand.input_b, y, pd.pair_id, pd.local_date,
                                 cand.layer_index)
                )
    if pairs and {p.y for p in pairs} == {0, 1}:
        return pairs
    raise PipelineError("training pair construction left a class empty")


@dataclass
class PipelineCVResult:
    variant: PipelineVariant
    specs: PipelineSpecs
    train_result: TrainResult
    fold_of_day: dict
    verdicts: list[Verdict]
    pooled: Metrics
    pooled_weighted: Metrics
    counts: ConfusionCounts
    timing: dict


def run_pipeline_cv(
    pair_days: Sequence[PairDay],
    variant: PipelineVariant,
    num_layers: int,
    canvas: Optional[CanvasSpec] = None,
    contrastive: Optional[ContrastiveParams] = None,
    optimizer: Optional[OptimizerConfig] = None,
    arch: Optional[SiameseArchitecture] = None,
    folds: int = 5,
    seed: int = 7,
    crop_pad: int = 2,
    max_gap_ms: Optional[int] = None,
    filter_threshold: Optional[float] = None,
) -> PipelineCVResult:
    """Cross-validated train + classify over a labeled corpus.

    Every day is classified exactly once, by the model of the fold holding
    it out (days that never produce a surviving layer pair are negative by
    construction and sit outside the folds). Pooled metrics cover all days.
    """
    arch = arch or SiameseArchitecture()
    canvas = canvas or CanvasSpec()
    specs = PipelineSpecs(
        layer_spec=LayerSpec(num_layers),
        canvas=canvas,
        crop_pad=crop_pad,
        input_size=arch.input_size,
        max_gap_ms=max_gap_ms,
        filter_threshold=filter_threshold,
    )
    t0 = time.perf_counter()
    prep = prepare_corpus(pair_days, variant, specs)
    prep_seconds = time.perf_counter() - t0
    pairs = build_training_pairs(prep)
    day_labels = {(pd.pair_id, pd.local_date): bool(pd.label) for pd in prep.days}
    pair_day_keys = {p.day_key() for p in pairs}
    train_labels = {k: day_labels[k] for k in pair_day_keys}

    t0 = time.perf_counter()
    result = train(
        pairs,
        contrastive or ContrastiveParams(),
        optimizer or OptimizerConfig(),
        arch=arch,
        folds=folds,
        seed=seed,
        day_labels=train_labels,
    )
    train_seconds = time.perf_counter() - t0
    fold_of_day = result.fold_of_day

    t0 = time.perf_counter()
    verdicts = []
    decisions, labels = [], []
    for idx, pd in enumerate(prep.days):
        key = (pd.pair_id, pd.local_date)
        fold = fold_of_day.get(key, 0)
        model = result.folds[fold].model
        verdict = classify_day(pd, variant, model, prep.specs, candidates=prep.candidates[idx])
        verdicts.append(verdict)
        decisions.append(verdict.decision)
        labels.append(bool(pd.label))
    classify_seconds = time.perf_counter() - t0

    counts = ConfusionCounts.from_decisions(decisions, labels)
    exec_seconds = prep_seconds + classify_seconds
    pooled = compute_metrics(counts, exec_time_seconds=exec_seconds)
    pooled_weighted = compute_weighted_metrics(counts, exec_time_seconds=exec_seconds)
    timing = {
        "prepare_seconds": prep_seconds,
        "train_seconds": train_seconds,
        "classify_seconds": classify_seconds,
        "exec_seconds": exec_seconds,
        "instances": len(prep.days),
        "exec_seconds_per_instance": exec_seconds / len(prep.days) if prep.days else 0.0,
    }
    return PipelineCVResult(
        variant, prep.specs, result, fold_of_day, verdicts, pooled, pooled_weighted, counts, timing
    )
