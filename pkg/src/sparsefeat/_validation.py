"""Input validation helpers used by the estimators and the functional API."""

import numpy as np

from .exceptions import DimensionError, NumericError


def check_tensor3(t, name="tensor", allow_batch=True):
    """Return ``t`` as a float array of shape (maps, h, w) or (n, maps, h, w).

    Integer input is promoted to float64; float32 input is kept as is.
    """
    t = np.asarray(t)
    if not np.issubdtype(t.dtype, np.floating):
        t = t.astype(np.float64)
    ok_ndim = (3, 4) if allow_batch else (3,)
    if t.ndim not in ok_ndim:
        raise DimensionError(f"{name} must have {' or '.join(map(str, ok_ndim))} dims, got shape {t.shape}")
    if not np.all(np.isfinite(t)):
        raise NumericError(f"{name} contains non-finite values")
    return t


def as_batch(t):
    """Add a leading batch axis to a single Tensor3. Returns (array4d, was_single)."""
    if t.ndim == 3:
        return t[None], True
    return t, False


def check_finite(a, name="array"):
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{name} contains non-finite values")
    return a


def check_labels(y, n_classes=None):
    y = np.asarray(y)
    if y.ndim != 1:
        raise DimensionError(f"labels must be 1-D, got shape {y.shape}")
    if n_classes is not None and y.size and (y.min() < 0 or y.max() >= n_classes):
        from .exceptions import LabelError

        raise LabelError(f"labels must lie in [0, {n_classes})")
    return y
