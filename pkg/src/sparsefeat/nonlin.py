"""Pointwise nonlinearities: smooth soft-shrinkage, abs rectification, tanh.

The smooth shrinkage is

    sh(x) = sgn(x) * ((1/beta) * log(exp(beta*b) + exp(beta*|x|) - 1) - b)

which equals ``sgn(x)(|x| + (1/beta) log(1 + e^{beta(b-|x|)} - e^{-beta|x|}) - b)``.
It is odd, passes through the origin with a continuous derivative, and
tends to soft-thresholding ``sgn(x) max(|x| - b, 0)`` as beta grows.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import ParameterError


@dataclass
class ShrinkParams:
    """Per-component threshold ``b`` and a shared smoothness ``beta``."""

    b: np.ndarray
    beta: float = 5.0

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=np.float64)
        if not self.beta > 0:
            raise ParameterError(f"beta must be > 0, got {self.beta}")

    @classmethod
    def init(cls, n, b=0.1, beta=5.0):
        return cls(np.full(n, b), beta)


def _log_e(a, b, beta):
    # log(E) and the normalised exponentials e^{beta a}/E, e^{beta b}/E,
    # with E = e^{beta b} + e^{beta a} - 1, evaluated without overflow.
    ba, bb = beta * a, beta * b
    m = np.maximum(np.maximum(ba, bb), 0.0)
    ea = np.exp(ba - m)
    eb = np.exp(bb - m)
    # E e^{-m} = ea + eb - e^{-m}; the two cases keep the subtraction exact.
    # Only the unselected case can overflow.
    with np.errstate(over="ignore", invalid="ignore"):
        em = np.where(ba >= bb, -np.expm1(-ba) * np.exp(-m + ba) + eb, ea - np.expm1(-bb) * np.exp(-m + bb))
    em = np.maximum(em, np.finfo(float).tiny)
    return m + np.log(em), ea / em, eb / em


def soft_shrink(x, b, beta):
    if not beta > 0:
        raise ParameterError(f"beta must be > 0, got {beta}")
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    log_e, _, _ = _log_e(a, b, beta)
    return np.sign(x) * (log_e / beta - b)


def soft_shrink_grad(x, b, beta):
    """Elementwise partials ``(d/dx, d/db, d/dbeta)`` of :func:`soft_shrink`."""
    if not beta > 0:
        raise ParameterError(f"beta must be > 0, got {beta}")
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    b = np.broadcast_to(b, x.shape)
    log_e, qa, qb = _log_e(a, b, beta)
    s = np.sign(x)
    dx = qa
    db = s * (qb - 1.0)
    dbeta = s * ((b * qb + a * qa) / beta - log_e / beta**2)
    return dx, db, dbeta


def abs_rectify(t):
    return np.abs(t)


def abs_rectify_backward(x, grad):
    # sgn(0) = 0: exact zeros pass no gradient
    return grad * np.sign(x)


def tanh_backward(y, grad):
    """Backward of tanh given its output ``y``."""
    return grad * (1.0 - y * y)
