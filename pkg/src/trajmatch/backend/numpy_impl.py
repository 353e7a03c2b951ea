"""Pure NumPy implementation of the kernel contract.

Mirrors `trajmatch.backend._core` (the compiled extension) operation for
operation. Accumulation orders and float expressions are kept identical to
the compiled kernels so both backends produce bit-identical arrays; the
parity test suite asserts this. Activations use NHWC layout throughout.
"""

from __future__ import annotations

import numpy as np

NAME = "numpy"


def im2col(x: np.ndarray, kh: int, kw: int, out: np.ndarray | None = None) -> np.ndarray:
    """x [N,H,W,C] -> patch rows [N*OH*OW, kh*kw*C], feature order (i, j, c).

    Pass a preallocated `out` to avoid large-allocation churn in hot loops.
    """
    n, h, w, c = x.shape
    oh, ow = h - kh + 1, w - kw + 1
    s0, s1, s2, s3 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x, shape=(n, oh, ow, kh, kw, c), strides=(s0, s1, s2, s1, s2, s3)
    )
    shape = (n * oh * ow, kh * kw * c)
    if out is None:
        out = np.empty(shape, dtype=x.dtype)
    elif out.shape != shape or out.dtype != x.dtype:
        raise ValueError(f"im2col out buffer mismatch: {out.shape} vs {shape}")
    np.copyto(out.reshape(n, oh, ow, kh, kw, c), windows)
    return out


def col2im(
    cols: np.ndarray, n: int, h: int, w: int, c: int, kh: int, kw: int,
    out: np.ndarray | None = None,
) -> np.ndarray:
    """Adjoint of im2col: scatter-add patch rows onto [N,H,W,C]."""
    oh, ow = h - kh + 1, w - kw + 1
    patches = cols.reshape(n, oh, ow, kh, kw, c)
    if out is None:
        out = np.zeros((n, h, w, c), dtype=cols.dtype)
    else:
        out.fill(0)
    # (i, j) ascending: the compiled kernel accumulates in the same order
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + oh, j : j + ow, :] += patches[:, :, :, i, j, :]
    return out


def maxpool2_forward(
    x: np.ndarray, out_y: np.ndarray | None = None, out_idx: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """NHWC 2x2 stride-2 max pooling; trailing odd row/col dropped.

    Returns (pooled, idx) where idx in {0,1,2,3} encodes the argmax position
    row-major within each window (first maximum wins on ties).
    """
    n, h, w, c = x.shape
    oh, ow = h // 2, w // 2
    v = (
        x[:, : oh * 2, : ow * 2, :]
        .reshape(n, oh, 2, ow, 2, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(n, oh, ow, 4, c)
    )
    idx = v.argmax(axis=3).astype(np.uint8)
    y = np.take_along_axis(v, idx[:, :, :, None, :].astype(np.intp), axis=3)[:, :, :, 0, :]
    if out_y is None:
        out_y = np.ascontiguousarray(y)
    else:
        np.copyto(out_y, y)
    if out_idx is None:
        out_idx = np.ascontiguousarray(idx)
    else:
        np.copyto(out_idx, idx)
    return out_y, out_idx


def maxpool2_backward(
    dy: np.ndarray, idx: np.ndarray, h: int, w: int, out: np.ndarray | None = None
) -> np.ndarray:
    """Route pooled gradients back to the argmax positions of a [.,h,w,.] input."""
    n, oh, ow, c = dy.shape
    flat = np.zeros((n, oh, ow, 4, c), dtype=dy.dtype)
    np.put_along_axis(flat, idx[:, :, :, None, :].astype(np.intp), dy[:, :, :, None, :], axis=3)
    if out is None:
        out = np.zeros((n, h, w, c), dtype=dy.dtype)
    else:
        out.fill(0)
    out[:, : oh * 2, : ow * 2, :] = (
        flat.reshape(n, oh, ow, 2, 2, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(n, oh * 2, ow * 2, c)
    )
    return out


def colormap_u8(ts: np.ndarray) -> np.ndarray:
    """Map normalized times in [0,1] to RGB: hue sweep 240 deg (blue) -> 0 deg (red)."""
    t = np.asarray(ts, dtype=np.float64)
    h = 240.0 * (1.0 - t)
    s0 = h < 60.0
    s1 = (h >= 60.0) & (h < 120.0)
    s2 = (h >= 120.0) & (h < 180.0)
    s3 = h >= 180.0
    r = np.select([s0, s1, s2, s3], [1.0, (120.0 - h) / 60.0, 0.0, 0.0])
    g = np.select([s0, s1, s2, s3], [h / 60.0, 1.0, 1.0, (240.0 - h) / 60.0])
    b = np.select([s0, s1, s2, s3], [0.0, 0.0, (h - 120.0) / 60.0, 1.0])
    rgb = np.stack([r, g, b], axis=-1)
    return np.floor(rgb * 255.0 + 0.5).astype(np.uint8)


def _segment(img, x0, y0, x1, y1, t0, t1):
    adx, ady = abs(x1 - x0), abs(y1 - y0)
    n = max(adx, ady)
    if n == 0:
        return
    sx = 1 if x1 >= x0 else -1
    sy = 1 if y1 >= y0 else -1
    j = np.arange(n + 1, dtype=np.int64)
    if adx >= ady:
        # midpoint walk along x; minor offset = round-half-up of j*ady/adx
        xp = x0 + sx * j
        yp = y0 + sy * ((2 * j * ady + adx) // (2 * adx))
    else:
        yp = y0 + sy * j
        xp = x0 + sx * ((2 * j * adx + ady) // (2 * ady))
    t = t0 + (t1 - t0) * (j / n)
    img[yp, xp] = colormap_u8(t)


def draw_polyline(
    img: np.ndarray,
    xs: np.ndarray,
    ys: np.ndarray,
    ts: np.ndarray,
    seg_mask: np.ndarray,
) -> None:
    """Paint a time-ordered polyline onto img [H,W,3] (uint8, in place).

    Each sample paints a dot colored by its normalized time; consecutive
    samples with seg_mask[i] set are joined by a midpoint-rasterized segment
    whose pixels interpolate the two times. Later samples paint over earlier
    ones.
    """
    n = len(xs)
    for i in range(n):
        img[ys[i], xs[i]] = colormap_u8(np.float64(ts[i]))
        if i + 1 < n and seg_mask[i]:
            _segment(img, int(xs[i]), int(ys[i]), int(xs[i + 1]), int(ys[i + 1]), ts[i], ts[i + 1])
