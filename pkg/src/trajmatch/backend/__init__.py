"""Kernel backend selection.

The hot inner loops (patch extraction for convolutions, 2x2 pooling,
polyline rasterization) exist twice: a Cython extension
(`trajmatch.backend._core`) and a pure NumPy fallback
(`trajmatch.backend.numpy_impl`). The extension is used when importable;
set TRAJMATCH_BACKEND=numpy|cython to force one. Both produce bit-identical
results, so the choice only affects speed.
"""

from __future__ import annotations

import os

_requested = os.environ.get("TRAJMATCH_BACKEND", "auto")

if _requested not in ("auto", "cython", "numpy"):
    raise ImportError(f"TRAJMATCH_BACKEND must be auto, cython or numpy, got {_requested!r}")

if _requested in ("auto", "cython"):
    try:
        from trajmatch.backend import _core as _impl  # type: ignore[attr-defined]
    except ImportError:
        if _requested == "cython":
            raise
        from trajmatch.backend import numpy_impl as _impl
else:
    from trajmatch.backend import numpy_impl as _impl

ACTIVE = _impl.NAME

im2col = _impl.im2col
col2im = _impl.col2im
maxpool2_forward = _impl.maxpool2_forward
maxpool2_backward = _impl.maxpool2_backward
colormap_u8 = _impl.colormap_u8
draw_polyline = _impl.draw_polyline


def available_backends() -> list[str]:
    names = []
    try:
        from trajmatch.backend import _core  # noqa: F401

        names.append("cython")
    except ImportError:
        pass
    names.append("numpy")
    return names


def load_backend(name: str):
    """Return a specific backend module (for parity tests and benchmarks)."""
    if name == "cython":
        from trajmatch.backend import _core

        return _core
    if name == "numpy":
        from trajmatch.backend import numpy_impl

        return numpy_impl
    raise ValueError(f"unknown backend {name!r}")
