"""Rasterize day traces into per-layer RGB trajectory images.

A day (or any period) is split into l equal time windows; each window gets
one image per person on a shared canvas whose geographic extent covers both
members' samples in that window. Samples become pixels through an affine
lat/lon transform (margin inset, axes scaled independently), consecutive
samples are joined with 1px midpoint-rasterized segments, and pixel color
encodes normalized time within the window (blue early, red late).
"""

from __future__ import annotations

import datetime
import json
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from trajmatch import backend
from trajmatch.errors import RasterError
from trajmatch.ingest import MS_PER_DAY, DayTrace, PairDay

WHITE = 255


@dataclass(frozen=True)
class LayerSpec:
    num_layers: int
    period_start_ms: int = 0
    period_end_ms: int = MS_PER_DAY

    def __post_init__(self):
        if self.num_layers < 1:
            raise RasterError(f"num_layers must be positive, got {self.num_layers}")
        if not (0 <= self.period_start_ms < self.period_end_ms <= MS_PER_DAY):
            raise RasterError("invalid period bounds")

    def window(self, layer_index: int) -> tuple[int, int]:
        """Half-open [start, end) window of a 1-based layer index."""
        if not 1 <= layer_index <= self.num_layers:
            raise RasterError(f"layer index {layer_index} out of 1..{self.num_layers}")
        span = self.period_end_ms - self.period_start_ms
        i = layer_index - 1
        lo = self.period_start_ms + (i * span) // self.num_layers
        hi = self.period_start_ms + ((i + 1) * span) // self.num_layers
        return lo, hi

    def windows(self) -> list[tuple[int, int]]:
        return [self.window(i) for i in range(1, self.num_layers + 1)]


@dataclass(frozen=True)
class CanvasSpec:
    width: int = 256
    height: int = 256
    margin: int = 8

    def __post_init__(self):
        if self.width <= 2 * self.margin or self.height <= 2 * self.margin:
            raise RasterError("canvas must be wider/taller than twice the margin")


@dataclass(frozen=True)
class GeoExtent:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float

    def __post_init__(self):
        if self.lat_min > self.lat_max or self.lon_min > self.lon_max:
            raise RasterError("inverted extent")


@dataclass
class LayerImage:
    pair_id: str
    device_id: str
    local_date: Optional[datetime.date]
    layer_index: int  # 1-based
    pixels: np.ndarray  # uint8 [H, W, 3]
    colored_pixel_count: int
    extent: Optional[GeoExtent]
    window: tuple[int, int]  # [start_ms, end_ms) within the day


def count_colored(pixels: np.ndarray) -> int:
    """Number of non-background (non-white) pixels."""
    return int(np.any(pixels != WHITE, axis=2).sum())


def colormap(t_norm: float) -> tuple[int, int, int]:
    """RGB for a normalized time; hue sweeps 240 deg (blue) to 0 deg (red)."""
    if not 0.0 <= t_norm <= 1.0:
        raise RasterError(f"colormap parameter {t_norm} outside [0, 1]")
    rgb = backend.colormap_u8(np.asarray([float(t_norm)], dtype=np.float64))[0]
    return int(rgb[0]), int(rgb[1]), int(rgb[2])


def trace_arrays(trace: DayTrace) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(ms_of_day int64, lat f64, lon f64) arrays for a trace."""
    n = len(trace.samples)
    ms = np.empty(n, dtype=np.int64)
    lat = np.empty(n, dtype=np.float64)
    lon = np.empty(n, dtype=np.float64)
    for i, s in enumerate(trace.samples):
        ms[i] = s.ms_of_day
        lat[i] = s.lat
        lon[i] = s.lon
    return ms, lat, lon


def compute_pair_extent(pair_day: PairDay, window: tuple[int, int]) -> Optional[GeoExtent]:
    """Smallest extent covering both members' samples in the window; None if empty."""
    lo, hi = window
    lats: list[float] = []
    lons: list[float] = []
    for trace in (pair_day.trace_a, pair_day.trace_b):
        for s in trace.samples:
            if lo <= s.ms_of_day < hi:
                lats.append(s.lat)
                lons.append(s.lon)
    if not lats:
        return None
    return GeoExtent(min(lats), max(lats), min(lons), max(lons))


def project(
    lat: np.ndarray, lon: np.ndarray, extent: GeoExtent, canvas: CanvasSpec
) -> tuple[np.ndarray, np.ndarray]:
    """Affine lat/lon -> integer pixel coords (x right, y down, margin inset).

    Axes scale independently; a zero-span axis collapses to the canvas
    center line. Rounding is half-up, shared by both backends.
    """
    xspan = canvas.width - 1 - 2 * canvas.margin
    yspan = canvas.height - 1 - 2 * canvas.margin
    lon_span = extent.lon_max - extent.lon_min
    lat_span = extent.lat_max - extent.lat_min
    if lon_span > 0.0:
        fx = (lon - extent.lon_min) / lon_span
        x = canvas.margin + np.floor(fx * xspan + 0.5).astype(np.int64)
    else:
        x = np.full(lon.shape, (canvas.width - 1) // 2, dtype=np.int64)
    if lat_span > 0.0:
        fy = (lat - extent.lat_min) / lat_span
        y = (canvas.height - 1 - canvas.margin) - np.floor(fy * yspan + 0.5).astype(np.int64)
    else:
        y = np.full(lat.shape, (canvas.height - 1) // 2, dtype=np.int64)
    return x, y


def blank_canvas(canvas: CanvasSpec) -> np.ndarray:
    return np.full((canvas.height, canvas.width, 3), WHITE, dtype=np.uint8)


def render_layer(
    trace: DayTrace,
    window: tuple[int, int],
    extent: Optional[GeoExtent],
    canvas: CanvasSpec,
    pair_id: str = "",
    layer_index: int = 1,
    max_gap_ms: Optional[int] = None,
) -> LayerImage:
    """Render one person's in-window samples onto a fresh canvas.

    Consecutive samples are joined unless their time gap exceeds
    max_gap_ms (unlimited by default). Samples must lie inside the extent.
    """
    ms, lat, lon = trace_arrays(trace)
    lo, hi = window
    keep = (ms >= lo) & (ms < hi)
    ms, lat, lon = ms[keep], lat[keep], lon[keep]
    img = blank_canvas(canvas)
    if ms.size == 0:
        return LayerImage(pair_id, trace.device_id, trace.local_date, layer_index, img, 0, extent, window)
    if extent is None:
        raise RasterError("non-empty window requires an extent")
    if not (
        (lat >= extent.lat_min).all()
        and (lat <= extent.lat_max).all()
        and (lon >= extent.lon_min).all()
        and (lon <= extent.lon_max).all()
    ):
        raise RasterError("samples outside the supplied extent")
    x, y = project(lat, lon, extent, canvas)
    t = (ms - lo) / float(hi - lo)
    if max_gap_ms is None:
        seg = np.ones(max(ms.size - 1, 0), dtype=np.uint8)
    else:
        seg = (np.diff(ms) <= max_gap_ms).astype(np.uint8)
    backend.draw_polyline(img, x, y, t, seg)
    return LayerImage(
        pair_id,
        trace.device_id,
        trace.local_date,
        layer_index,
        img,
        count_colored(img),
        extent,
        window,
    )


def render_pair_day(
    pair_day: PairDay,
    spec: LayerSpec,
    canvas: CanvasSpec,
    max_gap_ms: Optional[int] = None,
) -> list[tuple[LayerImage, LayerImage]]:
    """One image pair per layer; both images of a layer share the same extent."""
    out = []
    for i, window in enumerate(spec.windows(), start=1):
        extent = compute_pair_extent(pair_day, window)
        img_a = render_layer(
            pair_day.trace_a, window, extent, canvas, pair_day.pair_id, i, max_gap_ms
        )
        img_b = render_layer(
            pair_day.trace_b, window, extent, canvas, pair_day.pair_id, i, max_gap_ms
        )
        out.append((img_a, img_b))
    return out


# --- persistence -----------------------------------------------------------

def image_filename(device_id: str, num_layers: int, layer_index: int) -> str:
    return f"{device_id}_{num_layers}layers_{layer_index}.png"


def save_png(image: LayerImage, path) -> None:
    from PIL import Image

    Image.fromarray(image.pixels, mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def sidecar_record(image: LayerImage, num_layers: int, path: str, box=None) -> dict:
    rec = {
        "record": "layer_image",
        "pair_id": image.pair_id,
        "device_id": image.device_id,
        "local_date": image.local_date.isoformat() if image.local_date else None,
        "layer_index": image.layer_index,
        "num_layers": num_layers,
        "window_ms": list(image.window),
        "extent": None
        if image.extent is None
        else [image.extent.lat_min, image.extent.lat_max, image.extent.lon_min, image.extent.lon_max],
        "colored_pixel_count": image.colored_pixel_count,
        "path": path,
    }
    if box is not None:
        rec["bounding_box"] = None if box.empty else [box.x0, box.y0, box.x1, box.y1]
    return rec


def write_sidecar(path, records: Iterable[dict], provenance: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if provenance is not None:
            fh.write(json.dumps({"record": "provenance", **provenance}, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
