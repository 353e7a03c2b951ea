"""Pair routine-pattern analysis across many days.

Per person, samples from all days are pooled and density-clustered; noise
samples (non-routine detours) are discarded. The retained samples are
rendered as multi-day layer images, color-coded by time of day, and each
layer pair is scored by a trained embedder. Layers too sparse for a
reliable distance are excluded; the rest are ranked by ascending distance,
the smallest indicating the most likely co-behavior window.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from trajmatch import quality
from trajmatch.errors import RoutineError
from trajmatch.ingest import DayTrace
from trajmatch.raster import (
    CanvasSpec,
    GeoExtent,
    LayerImage,
    LayerSpec,
    blank_canvas,
    count_colored,
    project,
    trace_arrays,
)
from trajmatch import backend
from trajmatch.siamese import SiameseModel, score_pair, resize_nearest

NOISE = -1


def dbscan(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Density-based clustering over (lat, lon) with Euclidean distance.

    Returns one label per point: cluster ids 0..k-1 or -1 for noise.
    Neighborhoods use dist <= eps and include the point itself.
    Deterministic given input order; a border point reachable from several
    clusters joins the first-discovered one (clusters expand one at a time,
    seeded in ascending point order).
    """
    if eps <= 0:
        raise RoutineError(f"eps must be positive, got {eps}")
    if min_pts < 1:
        raise RoutineError(f"min_pts must be at least 1, got {min_pts}")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    labels = np.full(n, -2, dtype=np.int64)  # -2: unvisited
    if n == 0:
        return labels
    eps2 = eps * eps

    def neighbors(i: int) -> np.ndarray:
        dx = pts[:, 0] - pts[i, 0]
        dy = pts[:, 1] - pts[i, 1]
        return np.nonzero(dx * dx + dy * dy <= eps2)[0]

    cluster = -1
    for i in range(n):
        if labels[i] != -2:
            continue
        nb = neighbors(i)
        if nb.size < min_pts:
            labels[i] = NOISE
            continue
        cluster += 1
        labels[i] = cluster
        queue = list(nb)
        qi = 0
        while qi < len(queue):
            j = int(queue[qi])
            qi += 1
            if labels[j] == NOISE:
                labels[j] = cluster  # border point discovered from this cluster
            if labels[j] != -2:
                continue
            labels[j] = cluster
            nbj = neighbors(j)
            if nbj.size >= min_pts:
                queue.extend(nbj)
    return labels


@dataclass
class RoutineFilterResult:
    traces: list[DayTrace]  # same days, noise samples removed
    labels: np.ndarray  # dbscan label per pooled input sample
    removed: int
    kept: int


def routine_filter(
    traces: Sequence[DayTrace], eps: float = 1e-4, min_pts: int = 5
) -> RoutineFilterResult:
    """Drop samples that density clustering marks as noise (non-routine paths)."""
    if len(traces) < 2:
        raise RoutineError("routine filtering needs at least two days of data")
    pooled = []
    spans = []
    for trace in traces:
        start = len(pooled)
        pooled.extend((s.lat, s.lon) for s in trace.samples)
        spans.append((start, len(pooled)))
    labels = dbscan(np.asarray(pooled, dtype=np.float64), eps, min_pts)
    kept_traces = []
    kept = 0
    for trace, (lo, hi) in zip(traces, spans):
        keep = [s for s, lab in zip(trace.samples, labels[lo:hi]) if lab != NOISE]
        kept += len(keep)
        kept_traces.append(DayTrace(trace.device_id, trace.local_date, tuple(keep)))
    removed = len(pooled) - kept
    if kept == 0:
        raise RoutineError("density filtering removed every sample; lower min_pts or raise eps")
    return RoutineFilterResult(kept_traces, labels, removed, kept)


def render_multiday_layer(
    traces: Sequence[DayTrace],
    window: tuple[int, int],
    extent: Optional[GeoExtent],
    canvas: CanvasSpec,
    device_id: str,
    layer_index: int,
) -> LayerImage:
    """Overlay one person's in-window samples from many days on one canvas.

    Days draw in chronological order; within a day samples connect as
    usual, never across days. Color encodes time of day within the window.
    """
    lo, hi = window
    img = blank_canvas(canvas)
    total = 0
    for trace in sorted(traces, key=lambda t: t.local_date):
        ms, lat, lon = trace_arrays(trace)
        keep = (ms >= lo) & (ms < hi)
        ms, lat, lon = ms[keep], lat[keep], lon[keep]
        if ms.size == 0:
            continue
        if extent is None:
            raise RoutineError("non-empty window requires an extent")
        total += int(ms.size)
        x, y = project(lat, lon, extent, canvas)
        t = (ms - lo) / float(hi - lo)
        backend.draw_polyline(img, x, y, t, np.ones(max(ms.size - 1, 0), dtype=np.uint8))
    return LayerImage("", device_id, None, layer_index, img, count_colored(img), extent, window)


def build_pair_routine_images(
    traces_a: Sequence[DayTrace],
    traces_b: Sequence[DayTrace],
    spec: LayerSpec,
    canvas: CanvasSpec = CanvasSpec(),
    eps: float = 1e-4,
    min_pts: int = 5,
) -> list[tuple[LayerImage, LayerImage]]:
    """Routine-filter both members, then render shared-extent multi-day layers."""
    filt_a = routine_filter(traces_a, eps, min_pts)
    filt_b = routine_filter(traces_b, eps, min_pts)
    out = []
    for i, window in enumerate(spec.windows(), start=1):
        lo, hi = window
        lats, lons = [], []
        for traces in (filt_a.traces, filt_b.traces):
            for trace in traces:
                for s in trace.samples:
                    if lo <= s.ms_of_day < hi:
                        lats.append(s.lat)
                        lons.append(s.lon)
        extent = GeoExtent(min(lats), max(lats), min(lons), max(lons)) if lats else None
        dev_a = filt_a.traces[0].device_id if filt_a.traces else "a"
        dev_b = filt_b.traces[0].device_id if filt_b.traces else "b"
        img_a = render_multiday_layer(filt_a.traces, window, extent, canvas, dev_a, i)
        img_b = render_multiday_layer(filt_b.traces, window, extent, canvas, dev_b, i)
        out.append((img_a, img_b))
    return out


@dataclass
class LayerRanking:
    layer_index: int
    window: tuple[int, int]
    distance: Optional[float]
    excluded: bool
    reason: Optional[str] = None


@dataclass
class RoutineReport:
    layers: list[LayerRanking]
    ranking: list[int]  # included layer indices, ascending distance
    min_pixels: float

    def as_dict(self) -> dict:
        return {
            "min_pixels": self.min_pixels,
            "layers": [
                {
                    "layer_index": lr.layer_index,
                    "window_ms": list(lr.window),
                    "distance": lr.distance,
                    "excluded": lr.excluded,
                    "reason": lr.reason,
                }
                for lr in self.layers
            ],
            "ranking": self.ranking,
        }


def routine_pixel_threshold(
    image_pairs: Sequence[tuple[LayerImage, LayerImage]], floor: float = 50.0
) -> float:
    """Sparse-layer exclusion threshold: lower quartile with an absolute floor.

    Near-blank multi-day images yield misleadingly small distances, so the
    floor keeps them out even when the whole set is sparse.
    """
    counts = [img.colored_pixel_count for pair in image_pairs for img in pair]
    stats = quality.stats_from_counts(counts)
    return max(floor, stats.p25)


def rank_layers(
    image_pairs: Sequence[tuple[LayerImage, LayerImage]],
    model: SiameseModel,
    min_pixels: Optional[float] = None,
) -> RoutineReport:
    """Score each usable layer pair and rank by ascending distance.

    Layers where either image has fewer colored pixels than min_pixels are
    excluded with a reason; ties in distance break toward the lower layer
    index.
    """
    if min_pixels is None:
        min_pixels = routine_pixel_threshold(image_pairs)
    rows: list[LayerRanking] = []
    for img_a, img_b in image_pairs:
        idx = img_a.layer_index
        if img_a.colored_pixel_count < min_pixels or img_b.colored_pixel_count < min_pixels:
            rows.append(
                LayerRanking(idx, img_a.window, None, True, "insufficient trajectory data")
            )
            continue
        d = score_pair(
            model,
            resize_nearest(img_a.pixels, model.input_size),
            resize_nearest(img_b.pixels, model.input_size),
        )
        rows.append(LayerRanking(idx, img_a.window, d, False))
    ranking = [
        r.layer_index
        for r in sorted(
            (r for r in rows if not r.excluded), key=lambda r: (r.distance, r.layer_index)
        )
    ]
    return RoutineReport(rows, ranking, float(min_pixels))


def distance_bar_chart_svg(report: RoutineReport, title: str = "per-layer distance") -> str:
    """Deterministic SVG bar chart of per-layer distances (excluded bars hatched)."""
    width, height, margin = 480, 280, 48
    plot_w, plot_h = width - 2 * margin, height - 2 * margin
    layers = report.layers
    finite = [r.distance for r in layers if r.distance is not None]
    dmax = max(finite) if finite else 1.0
    dmax = dmax if dmax > 0 else 1.0
    n = max(len(layers), 1)
    bar_w = plot_w / n * 0.7
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
    ]
    for i, row in enumerate(layers):
        cx = margin + plot_w * (i + 0.5) / n
        x0 = cx - bar_w / 2
        if row.distance is None:
            parts.append(
                f'<rect x="{x0:.1f}" y="{height - margin - 12:.1f}" width="{bar_w:.1f}" '
                f'height="12" fill="none" stroke="gray" stroke-dasharray="3,2"/>'
            )
            label = "n/a"
        else:
            bh = plot_h * (row.distance / dmax)
            parts.append(
                f'<rect x="{x0:.1f}" y="{height - margin - bh:.1f}" width="{bar_w:.1f}" '
                f'height="{bh:.1f}" fill="steelblue"/>'
            )
            label = f"{row.distance:.3g}"
        parts.append(
            f'<text x="{cx:.1f}" y="{height - margin + 16}" text-anchor="middle" '
            f'font-size="11">L{row.layer_index}</text>'
        )
        parts.append(
            f'<text x="{cx:.1f}" y="{height - margin + 30}" text-anchor="middle" '
            f'font-size="9">{label}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts)
