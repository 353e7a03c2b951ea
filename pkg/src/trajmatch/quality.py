"""Colored-pixel statistics and symmetric pair filtering.

Statistics are computed per layer-count configuration over a whole image
set (not per pair). The filter drops a layer for both members whenever
either member falls below the threshold; retention uses >=.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from trajmatch.errors import QualityError
from trajmatch.raster import LayerImage


@dataclass(frozen=True)
class FilterStats:
    min: float
    mean: float
    max: float
    p25: float
    p50: float
    p75: float


def _nearest_rank_index(n: int, percentile: float) -> int:
    """1-based nearest-rank index: ceil(p/100 * n), clipped to [1, n]."""
    return max(1, min(n, math.ceil(percentile / 100.0 * n)))


def stats_from_counts(counts: Sequence[int]) -> FilterStats:
    if len(counts) == 0:
        raise QualityError("cannot compute statistics of an empty image set")
    ordered = sorted(counts)
    n = len(ordered)
    return FilterStats(
        min=float(ordered[0]),
        mean=float(sum(ordered)) / n,
        max=float(ordered[-1]),
        p25=float(ordered[_nearest_rank_index(n, 25) - 1]),
        p50=float(ordered[_nearest_rank_index(n, 50) - 1]),
        p75=float(ordered[_nearest_rank_index(n, 75) - 1]),
    )


def compute_stats(images: Iterable[LayerImage]) -> FilterStats:
    """Order statistics of colored_pixel_count over an image set."""
    return stats_from_counts([img.colored_pixel_count for img in images])


def default_threshold(stats: FilterStats, num_layers: int) -> float:
    """Single-layer sets filter at the lower quartile, multi-layer at the median."""
    return stats.p25 if num_layers == 1 else stats.p50


def filter_pairs(
    image_pairs: Sequence[tuple[LayerImage, LayerImage]], threshold: float
) -> list[tuple[LayerImage, LayerImage]]:
    """Keep a pair iff BOTH images have colored_pixel_count >= threshold."""
    if threshold < 0:
        raise QualityError(f"threshold must be non-negative, got {threshold}")
    return [
        (a, b)
        for a, b in image_pairs
        if a.colored_pixel_count >= threshold and b.colored_pixel_count >= threshold
    ]


def stats_report(stats: FilterStats, num_layers: int, threshold: float) -> dict:
    return {
        "num_layers": num_layers,
        "min": stats.min,
        "mean": stats.mean,
        "max": stats.max,
        "p25": stats.p25,
        "p50": stats.p50,
        "p75": stats.p75,
        "threshold": threshold,
    }
