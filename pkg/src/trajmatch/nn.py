"""Minimal differentiable layers built on the kernel backend.

Forward/backward passes are written out explicitly; convolutions go through
im2col + one GEMM, so the heavy lifting stays in BLAS while patch
extraction and pooling run in the compiled backend when available.
Activations are NHWC [N,H,W,C]: the GEMM's row output is directly the next
layer's input, so no layout transposes happen anywhere. All layers are
deterministic (no stochastic ops at inference or training).
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from trajmatch import backend
from trajmatch.errors import ModelError

DTYPES = {"float32": np.float32, "float64": np.float64}


class Layer:
    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> list[np.ndarray]:
        return []

    def grads(self) -> list[np.ndarray]:
        return []

    def _ws(self, name: str, shape: tuple, dtype) -> np.ndarray:
        """Persistent per-layer workspace; large fresh allocations page-fault.

        Keyed by shape so the short final batch of an epoch keeps its own
        buffers instead of reallocating the full-batch ones every epoch.
        """
        store = getattr(self, "_workspaces", None)
        if store is None:
            store = self._workspaces = {}
        key = (name, shape, np.dtype(dtype))
        buf = store.get(key)
        if buf is None:
            buf = store[key] = np.empty(shape, dtype=dtype)
        return buf


class Conv2D(Layer):
    """Valid (no padding) stride-1 convolution with bias, NHWC.

    The very first layer of a network can skip its input gradient
    (needs_input_grad=False): nothing consumes it, and the thin GEMM plus
    scatter-add it would cost dominate that layer's backward pass.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 dtype, needs_input_grad: bool = True):
        fan_in = in_ch * kernel * kernel
        bound = 1.0 / math.sqrt(fan_in)
        # weights stored [out_ch, kh*kw*in_ch] matching im2col's feature order
        self.w = rng.uniform(-bound, bound, size=(out_ch, fan_in)).astype(dtype)
        self.b = np.zeros(out_ch, dtype=dtype)
        self.kernel = kernel
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.needs_input_grad = needs_input_grad
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self._cache = None

    def forward(self, x):
        n, h, w, c = x.shape
        k = self.kernel
        if c != self.in_ch:
            raise ModelError(f"expected {self.in_ch} input channels, got {c}")
        if h < k or w < k:
            raise ModelError(f"input {h}x{w} smaller than kernel {k}")
        oh, ow = h - k + 1, w - k + 1
        rows = n * oh * ow
        cols = backend.im2col(
            np.ascontiguousarray(x), k, k, out=self._ws("cols", (rows, k * k * c), x.dtype)
        )
        y = np.matmul(cols, self.w.T, out=self._ws("y", (rows, self.out_ch), x.dtype))
        y += self.b
        self._cache = (cols, (n, h, w, c))
        return y.reshape(n, oh, ow, self.out_ch)

    def backward(self, dy):
        cols, (n, h, w, c) = self._cache
        k = self.kernel
        dy_mat = dy.reshape(-1, self.out_ch)
        self.db = dy_mat.sum(axis=0)
        np.matmul(dy_mat.T, cols, out=self.dw)
        if not self.needs_input_grad:
            return None
        dcols = np.matmul(dy_mat, self.w, out=self._ws("dcols", cols.shape, cols.dtype))
        return backend.col2im(dcols, n, h, w, c, k, k,
                              out=self._ws("dx", (n, h, w, c), cols.dtype))

    def params(self):
        return [self.w, self.b]

    def grads(self):
        return [self.dw, self.db]


class ReLU(Layer):
    def forward(self, x):
        y = np.maximum(x, x.dtype.type(0), out=self._ws("y", x.shape, x.dtype))
        self._y = y
        return y

    def backward(self, dy):
        # relu output > 0 iff its input was; dy is ours to clobber
        dy *= self._y > 0
        return dy


class MaxPool2(Layer):
    """2x2 stride-2 max pooling (trailing odd row/col dropped), NHWC."""

    def forward(self, x):
        n, h, w, c = x.shape
        self._in_hw = h, w
        oh, ow = h // 2, w // 2
        y, self._idx = backend.maxpool2_forward(
            np.ascontiguousarray(x),
            out_y=self._ws("y", (n, oh, ow, c), x.dtype),
            out_idx=self._ws("idx", (n, oh, ow, c), np.uint8),
        )
        return y

    def backward(self, dy):
        h, w = self._in_hw
        n, oh, ow, c = dy.shape
        return backend.maxpool2_backward(
            np.ascontiguousarray(dy), self._idx, h, w,
            out=self._ws("dx", (n, h, w, c), dy.dtype),
        )


class Flatten(Layer):
    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._shape)


class Dense(Layer):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype):
        bound = 1.0 / math.sqrt(in_dim)
        self.w = rng.uniform(-bound, bound, size=(out_dim, in_dim)).astype(dtype)
        self.b = np.zeros(out_dim, dtype=dtype)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)

    def forward(self, x):
        self._x = x
        return x @ self.w.T + self.b

    def backward(self, dy):
        self.dw = dy.T @ self._x
        self.db = dy.sum(axis=0)
        return dy @ self.w

    def params(self):
        return [self.w, self.b]

    def grads(self):
        return [self.dw, self.db]


class Network:
    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy: np.ndarray):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def grads(self) -> list[np.ndarray]:
        return [g for layer in self.layers for g in layer.grads()]


class SGDMomentum:
    """Classic momentum: v = mu*v - lr*g; w += v."""

    def __init__(self, params: Sequence[np.ndarray], lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p) for p in self.params]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        for p, g, v in zip(self.params, grads, self.velocity):
            v *= p.dtype.type(self.momentum)
            v -= p.dtype.type(self.lr) * g
            p += v


def numeric_gradient(loss_fn, params: Sequence[np.ndarray], step: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of loss_fn() w.r.t. every entry of params."""
    grads = []
    for p in params:
        g = np.zeros(p.shape, dtype=np.float64)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lo_hi = loss_fn()
            flat[i] = orig - step
            lo_lo = loss_fn()
            flat[i] = orig
            gflat[i] = (lo_hi - lo_lo) / (2.0 * step)
        grads.append(g)
    return grads


def max_relative_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray]) -> float:
    """max |a-n| / max(|a|, |n|, 1e-7) over all entries."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-7)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst
