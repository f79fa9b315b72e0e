"""Dense layer kernels with analytic backward passes.

Arrays are plain ``numpy.ndarray`` in NCHW layout. The dtype of the input
decides the compute precision: float32 for training and inference, float64
for gradient checks.

Every convolution and dense product goes through :func:`matmul`, which can
count multiplies so that static MAC accounting can be checked against what
a forward pass actually executes.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class BackwardBeforeForward(RuntimeError):
    pass


@dataclass
class LayerGrad:
    d_input: np.ndarray
    d_weights: Optional[np.ndarray] = None
    d_bias: Optional[np.ndarray] = None


# ---------------------------------------------------------------------------
# multiply counter

_mac_count: Optional[list] = None


@contextlib.contextmanager
def count_multiplies() -> Iterator[list]:
    """Count scalar multiplies issued by :func:`matmul` inside the block.

    Yields a one-element list whose entry holds the running total.
    """
    global _mac_count
    previous = _mac_count
    _mac_count = [0]
    try:
        yield _mac_count
    finally:
        _mac_count = previous


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if _mac_count is not None:
        _mac_count[0] += a.shape[0] * a.shape[1] * b.shape[1]
    return a @ b


# ---------------------------------------------------------------------------
# convolution


def same_padding(k: int) -> tuple[int, int]:
    """Zero padding (before, after) that keeps a kernel of extent k size-preserving."""
    before = (k - 1) // 2
    return before, k - 1 - before


def _check_rank(x: np.ndarray, rank: int, name: str) -> None:
    if x.ndim != rank:
        raise ShapeError(f"{name} must be rank {rank}, got shape {x.shape}")
    if any(s < 1 for s in x.shape):
        raise ShapeError(f"{name} has an empty extent: {x.shape}")


def im2col(x: np.ndarray, kh: int, kw: int, pad_value=0) -> np.ndarray:
    """Unfold a same-padded NCHW input into a (Cin*kh*kw, N*H*W) patch matrix.

    Rows follow the (ci, dy, dx) layout of a weight tensor reshaped to
    (Cout, Cin*kh*kw); columns are ordered (n, y, x).
    """
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), same_padding(kh), same_padding(kw)),
                constant_values=pad_value)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # n, c, h, w, kh, kw
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * h * w)


def col2im(dcols: np.ndarray, shape: tuple, kh: int, kw: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch gradients back to the input."""
    n, c, h, w = shape
    (ph0, _), (pw0, _) = same_padding(kh), same_padding(kw)
    d = dcols.reshape(c, kh, kw, n, h, w)
    dxp = np.zeros((c, n, h + kh - 1, w + kw - 1), dtype=dcols.dtype)
    for dy in range(kh):
        for dx in range(kw):
            dxp[:, :, dy:dy + h, dx:dx + w] += d[:, dy, dx]
    return dxp[:, :, ph0:ph0 + h, pw0:pw0 + w].transpose(1, 0, 2, 3)


def conv2d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Stride-1 convolution with zero same-padding.

    Even kernels pad floor((k-1)/2) before and ceil((k-1)/2) after, so the
    output has the spatial extents of the input.
    """
    out, _ = _conv2d(x, weights, bias)
    return out


def _conv2d(x, weights, bias):
    _check_rank(x, 4, "conv2d input")
    _check_rank(weights, 4, "conv2d weights")
    cout, cin, kh, kw = weights.shape
    if x.shape[1] != cin:
        raise ShapeError(f"input has {x.shape[1]} channels, weights expect {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} does not match {cout} output channels")
    n, _, h, w = x.shape
    cols = im2col(x, kh, kw)
    out = matmul(weights.reshape(cout, -1), cols)
    out += bias[:, None]
    return out.reshape(cout, n, h, w).transpose(1, 0, 2, 3), cols


# ---------------------------------------------------------------------------
# pooling


def _pool_tiles(x: np.ndarray, pool: tuple[int, int]) -> np.ndarray:
    _check_rank(x, 4, "maxpool input")
    ph, pw = pool
    n, c, h, w = x.shape
    if ph < 1 or pw < 1 or ph > h or pw > w:
        raise ShapeError(f"pool {pool} does not fit input extents {(h, w)}")
    ho, wo = h // ph, w // pw
    t = x[:, :, :ho * ph, :wo * pw].reshape(n, c, ho, ph, wo, pw)
    return t.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, ph * pw)


def maxpool_forward(x: np.ndarray, pool: tuple[int, int]) -> np.ndarray:
    """Non-overlapping max pooling; trailing samples that do not fill a tile are dropped."""
    return _pool_tiles(x, pool).max(axis=-1)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    _check_rank(x, 4, "global_avg_pool input")
    return x.mean(axis=(2, 3), keepdims=True)


def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    _check_rank(x, 2, "dense input")
    _check_rank(weights, 2, "dense weights")
    if x.shape[1] != weights.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} features, weights expect {weights.shape[1]}")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match {weights.shape[0]} outputs")
    return matmul(x, weights.T) + bias


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# stateful layers (cache what backward needs)


class Layer:
    kind = "layer"
    params: dict

    def __init__(self):
        self.params = {}
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, upstream: np.ndarray) -> LayerGrad:
        raise NotImplementedError

    def output_shape(self, shape: tuple) -> tuple:
        raise NotImplementedError

    def _cached(self):
        if self._cache is None:
            raise BackwardBeforeForward(f"{self.kind}.backward called before forward")
        return self._cache


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, in_channels: int, filters: int, kernel: tuple[int, int]):
        super().__init__()
        self.kernel = tuple(kernel)
        self.params = {
            "weights": np.zeros((filters, in_channels) + self.kernel),
            "bias": np.zeros(filters),
        }

    def forward(self, x):
        w = self.params["weights"].astype(x.dtype, copy=False)
        b = self.params["bias"].astype(x.dtype, copy=False)
        out, cols = _conv2d(x, w, b)
        self._cache = (x.shape, cols, w)
        return out

    def backward(self, upstream):
        shape, cols, w = self._cached()
        cout = w.shape[0]
        g = upstream.transpose(1, 0, 2, 3).reshape(cout, -1)
        d_w = (g @ cols.T).reshape(w.shape)
        d_b = g.sum(axis=1)
        dcols = w.reshape(cout, -1).T @ g
        d_x = col2im(dcols, shape, *self.kernel)
        return LayerGrad(d_x, d_w, d_b)

    def output_shape(self, shape):
        return (self.params["weights"].shape[0],) + tuple(shape[1:])

    def macs(self, in_shape):
        cout, cin, kh, kw = self.params["weights"].shape
        _, h, w = self.output_shape(in_shape)
        return cout * cin * kh * kw * h * w


class MaxPool2D(Layer):
    kind = "maxpool"

    def __init__(self, pool: tuple[int, int]):
        super().__init__()
        self.pool = tuple(pool)

    def forward(self, x):
        tiles = _pool_tiles(x, self.pool)
        idx = tiles.argmax(axis=-1)
        self._cache = (x.shape, idx)
        return np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0]

    def backward(self, upstream):
        shape, idx = self._cached()
        n, c, h, w = shape
        ph, pw = self.pool
        ho, wo = idx.shape[2:]
        tiles = np.zeros(idx.shape + (ph * pw,), dtype=upstream.dtype)
        np.put_along_axis(tiles, idx[..., None], upstream[..., None], axis=-1)
        t = tiles.reshape(n, c, ho, wo, ph, pw).transpose(0, 1, 2, 4, 3, 5)
        d_x = np.zeros(shape, dtype=upstream.dtype)
        d_x[:, :, :ho * ph, :wo * pw] = t.reshape(n, c, ho * ph, wo * pw)
        return LayerGrad(d_x)

    def output_shape(self, shape):
        c, h, w = shape
        ph, pw = self.pool
        if ph > h or pw > w:
            raise ShapeError(f"pool {self.pool} does not fit extents {(h, w)}")
        return (c, h // ph, w // pw)


class GlobalAvgPool(Layer):
    kind = "gap"

    def forward(self, x):
        self._cache = x.shape
        return global_avg_pool(x)

    def backward(self, upstream):
        shape = self._cached()
        n, c, h, w = shape
        d_x = np.broadcast_to(upstream / (h * w), shape).copy()
        return LayerGrad(d_x)

    def output_shape(self, shape):
        return (shape[0], 1, 1)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, upstream):
        return LayerGrad(upstream.reshape(self._cached()))

    def output_shape(self, shape):
        return (int(np.prod(shape)),)


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.params = {
            "weights": np.zeros((out_features, in_features)),
            "bias": np.zeros(out_features),
        }

    def forward(self, x):
        w = self.params["weights"].astype(x.dtype, copy=False)
        b = self.params["bias"].astype(x.dtype, copy=False)
        out = dense_forward(x, w, b)
        self._cache = (x, w)
        return out

    def backward(self, upstream):
        x, w = self._cached()
        return LayerGrad(upstream @ w, upstream.T @ x, upstream.sum(axis=0))

    def output_shape(self, shape):
        return (self.params["weights"].shape[0],)

    def macs(self, in_shape):
        k, f = self.params["weights"].shape
        return k * f


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        out = np.maximum(x, 0)
        self._cache = out
        return out

    def backward(self, upstream):
        return LayerGrad(upstream * (self._cached() > 0))

    def output_shape(self, shape):
        return tuple(shape)
