"""Average, max and pyramid-average pooling with their adjoints."""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._validation import as_batch, check_tensor3
from .exceptions import DimensionError, ParameterError


@dataclass(frozen=True)
class PoolSpec:
    kind: str = "avg"
    window: int = 2
    stride: int = 2

    def __post_init__(self):
        if self.kind not in ("avg", "max"):
            raise ParameterError(f"unknown pooling kind {self.kind!r}")
        if not 1 <= self.stride <= self.window:
            raise ParameterError(f"need 1 <= stride <= window, got stride={self.stride} window={self.window}")

    def output_size(self, n):
        if self.window > n:
            raise DimensionError(f"pooling window {self.window} larger than input {n}")
        return (n - self.window) // self.stride + 1


@dataclass(frozen=True)
class PyramidSpec:
    levels: tuple

    def __post_init__(self):
        levels = tuple(tuple(int(v) for v in lv) for lv in self.levels)
        if not levels:
            raise ParameterError("pyramid needs at least one level")
        object.__setattr__(self, "levels", levels)
        for w, s in levels:
            PoolSpec("avg", w, s)

    def specs(self):
        return [PoolSpec("avg", w, s) for w, s in self.levels]

    def output_length(self, maps, h, w):
        return sum(maps * sp.output_size(h) * sp.output_size(w) for sp in self.specs())


def _windows(xb, spec):
    spec.output_size(xb.shape[2])
    spec.output_size(xb.shape[3])
    s = spec.stride
    return sliding_window_view(xb, (spec.window, spec.window), axis=(2, 3))[:, :, ::s, ::s]


def pool_forward(xb, spec):
    """Pool a batch (n, maps, h, w). Returns ``(out, cache)``."""
    win = _windows(xb, spec)
    if spec.kind == "avg":
        return win.mean(axis=(4, 5)), (xb.shape, spec, None)
    flat = win.reshape(win.shape[:4] + (-1,))
    # np.argmax picks the first maximum in scan order
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (xb.shape, spec, arg)


def pool_backward(grad, cache):
    shape, spec, arg = cache
    gx = np.zeros(shape, dtype=grad.dtype)
    w, s = spec.window, spec.stride
    ho, wo = grad.shape[2], grad.shape[3]
    for i in range(w):
        for j in range(w):
            if spec.kind == "avg":
                contrib = grad / (w * w)
            else:
                contrib = np.where(arg == i * w + j, grad, 0.0)
            gx[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += contrib
    return gx


def pool(t, spec):
    t = check_tensor3(t)
    xb, single = as_batch(t)
    out, _ = pool_forward(xb, spec)
    return out[0] if single else out


def pyramid_forward(xb, spec):
    outs, caches = [], []
    for sp in spec.specs():
        o, c = pool_forward(xb, sp)
        outs.append(o.reshape(o.shape[0], -1))
        caches.append((c, o.shape))
    return np.concatenate(outs, axis=1), caches


def pyramid_backward(grad, caches):
    gx = None
    start = 0
    for c, oshape in caches:
        size = int(np.prod(oshape[1:]))
        g = pool_backward(grad[:, start : start + size].reshape(oshape), c)
        gx = g if gx is None else gx + g
        start += size
    return gx


def pyramid_pool(t, spec):
    """Concatenate average pools at every level, flattened in level order."""
    t = check_tensor3(t)
    xb, single = as_batch(t)
    out, _ = pyramid_forward(xb, spec)
    return out[0] if single else out
