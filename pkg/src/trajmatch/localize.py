"""Trajectory localization: tight bounding boxes and padded crops.

The kept box is exactly the tight axis-aligned box over colored pixels, so
it is computed directly from the pixel grid rather than via region
proposals; the output is identical and deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from trajmatch.errors import LocalizeError
from trajmatch.raster import WHITE, LayerImage, count_colored


@dataclass(frozen=True)
class BoundingBox:
    x0: int
    y0: int
    x1: int  # inclusive
    y1: int  # inclusive
    empty: bool = False

    @staticmethod
    def empty_box() -> "BoundingBox":
        return BoundingBox(0, 0, -1, -1, empty=True)

    @property
    def width(self) -> int:
        return 0 if self.empty else self.x1 - self.x0 + 1

    @property
    def height(self) -> int:
        return 0 if self.empty else self.y1 - self.y0 + 1


def locate(image: LayerImage) -> BoundingBox:
    """Tight box over all non-background pixels; empty box iff none exist."""
    mask = np.any(image.pixels != WHITE, axis=2)
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return BoundingBox.empty_box()
    return BoundingBox(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))


def crop(image: LayerImage, box: BoundingBox, pad: int = 2) -> LayerImage:
    """Cut the box region plus up to pad white border, clipped at canvas edges.

    Colored pixel count is preserved; geographic extent metadata is carried
    over from the source image unchanged.
    """
    if box.empty:
        raise LocalizeError("cannot crop an empty bounding box")
    if pad < 0:
        raise LocalizeError(f"pad must be non-negative, got {pad}")
    h, w = image.pixels.shape[:2]
    x0 = max(0, box.x0 - pad)
    y0 = max(0, box.y0 - pad)
    x1 = min(w - 1, box.x1 + pad)
    y1 = min(h - 1, box.y1 + pad)
    pixels = np.ascontiguousarray(image.pixels[y0 : y1 + 1, x0 : x1 + 1])
    return LayerImage(
        pair_id=image.pair_id,
        device_id=image.device_id,
        local_date=image.local_date,
        layer_index=image.layer_index,
        pixels=pixels,
        colored_pixel_count=count_colored(pixels),
        extent=image.extent,
        window=image.window,
    )
