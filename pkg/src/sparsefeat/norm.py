"""Local subtractive and divisive contrast normalization.

Both steps pool over a Gaussian window and over *all* feature maps jointly.
At image borders the Gaussian weights are renormalised over the in-bounds
support, so constants are annihilated everywhere.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import correlate1d

from ._validation import as_batch, check_tensor3
from .exceptions import DimensionError, ParameterError


@dataclass(frozen=True)
class NormConfig:
    window: int = 9
    sigma: float = 1.6
    floor_mode: str = "mean"  # "mean": per-image mean of sigma_local; "constant": use ``floor``
    floor: float = 1.0
    eps: float = 1e-6  # absolute lower bound on the divisor

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ParameterError(f"window must be odd and >= 3, got {self.window}")
        if not self.sigma > 0:
            raise ParameterError(f"sigma must be > 0, got {self.sigma}")
        if self.floor_mode not in ("mean", "constant"):
            raise ParameterError(f"unknown floor_mode {self.floor_mode!r}")
        if self.floor_mode == "constant" and not self.floor > 0:
            raise ParameterError(f"floor must be > 0, got {self.floor}")


def gaussian_1d(window, sigma):
    r = np.arange(window) - window // 2
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    return g / g.sum()


def gaussian_kernel(window, sigma):
    """Normalised 2-D Gaussian weights (sum to one)."""
    g = gaussian_1d(window, sigma)
    return np.outer(g, g)


def _blur(a, g):
    # same-mode, zero padded, separable; g is symmetric so this is self-adjoint
    a = correlate1d(a, g, axis=-1, mode="constant")
    return correlate1d(a, g, axis=-2, mode="constant")


def _support(shape, g):
    return _blur(np.ones(shape[-2:]), g)


def _check_window(shape, cfg):
    if cfg.window > shape[-1] or cfg.window > shape[-2]:
        raise DimensionError(f"normalization window {cfg.window} larger than image {shape[-2]}x{shape[-1]}")


def _local_mean(xb, cfg):
    # Gaussian-weighted mean over the window and over all maps: (n, h, w)
    g = gaussian_1d(cfg.window, cfg.sigma)
    m = xb.shape[1]
    return _blur(xb.sum(axis=1), g) / (m * _support(xb.shape, g))


def subtractive_norm(t, cfg=NormConfig(), mode="same"):
    """Subtract the local Gaussian-weighted mean across all maps.

    ``mode="valid"`` keeps only positions whose window lies fully inside the
    image, shrinking each spatial dim by ``window - 1``.
    """
    t = check_tensor3(t)
    xb, single = as_batch(t)
    _check_window(xb.shape, cfg)
    if mode == "same":
        out = xb - _local_mean(xb, cfg)[:, None]
    elif mode == "valid":
        r = cfg.window // 2
        g = gaussian_kernel(cfg.window, cfg.sigma)
        win = sliding_window_view(xb.sum(axis=1), (cfg.window, cfg.window), axis=(1, 2))
        mean = np.einsum("nhwij,ij->nhw", win, g) / xb.shape[1]
        out = xb[:, :, r:-r, r:-r] - mean[:, None]
    else:
        raise ParameterError(f"unknown mode {mode!r}")
    return out[0] if single else out


def _local_std(vb, cfg):
    g = gaussian_1d(cfg.window, cfg.sigma)
    m = vb.shape[1]
    s2 = _blur((vb * vb).sum(axis=1), g) / (m * _support(vb.shape, g))
    return np.sqrt(np.maximum(s2, 0.0))


def _floor(sigma, cfg):
    if cfg.floor_mode == "mean":
        return sigma.mean(axis=(1, 2), keepdims=True)
    return np.full((sigma.shape[0], 1, 1), cfg.floor)


def divisive_norm(t, cfg=NormConfig()):
    """Divide by ``max(sigma_local, floor)``; sigma_local pools over all maps."""
    t = check_tensor3(t)
    vb, single = as_batch(t)
    _check_window(vb.shape, cfg)
    out, _ = _divisive_forward(vb, cfg)
    return out[0] if single else out


def _divisive_forward(vb, cfg):
    sigma = _local_std(vb, cfg)
    raw = _floor(sigma, cfg)
    # flat images leave only roundoff after the subtractive step; eps keeps it there
    clamped = raw < cfg.eps
    floor = np.maximum(raw, cfg.eps)
    use_sigma = sigma > floor
    d = np.where(use_sigma, sigma, floor)
    return vb / d[:, None], (vb, sigma, clamped, use_sigma, d)


def local_cn(t, cfg=NormConfig(), mode="same"):
    """Subtractive then divisive normalization (the N module)."""
    v = subtractive_norm(t, cfg, mode)
    return divisive_norm(v, cfg)


def local_cn_forward(xb, cfg):
    """Same-mode N on a batch, returning ``(out, cache)`` for backprop."""
    _check_window(xb.shape, cfg)
    vb = xb - _local_mean(xb, cfg)[:, None]
    out, cache = _divisive_forward(vb, cfg)
    return out, cache


def local_cn_backward(grad, cache, cfg):
    """Exact gradient of :func:`local_cn_forward`, branch of the max held fixed."""
    vb, sigma, clamped, use_sigma, d = cache
    g = gaussian_1d(cfg.window, cfg.sigma)
    m = vb.shape[1]
    support = m * _support(vb.shape, g)

    gv = grad / d[:, None]
    gd = -(grad * vb).sum(axis=1) / (d * d)
    gsigma = np.where(use_sigma, gd, 0.0)
    if cfg.floor_mode == "mean":
        # floor = mean(sigma) over the image
        gfloor = np.where(use_sigma, 0.0, gd).sum(axis=(1, 2), keepdims=True) * ~clamped
        gsigma = gsigma + gfloor / (sigma.shape[1] * sigma.shape[2])
    with np.errstate(divide="ignore", invalid="ignore"):
        gs2 = np.where(sigma > 0, gsigma / (2.0 * sigma), 0.0)
    gv = gv + 2.0 * vb * _blur(gs2 / support, g)[:, None]

    # subtractive step: v = x - A x
    gx = gv - _blur(gv.sum(axis=1) / support, g)[:, None]
    return gx
