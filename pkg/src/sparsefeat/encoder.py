"""Feed-forward code predictors.

``TanhEncoder`` computes ``g * tanh(W x + bias)``. ``SiEncoder`` computes
one step of learned shrinkage with lateral inhibition,
``sh(W x - S sh(W x))`` with ``S`` zero on the diagonal.

Both work in dense form (``filters`` is an (n, m) matrix, inputs are
(batch, m)) and in convolutional form (``filters`` is a
:class:`~sparsefeat.tensor.KernelBank`, inputs are (batch, maps, h, w)).
Per-component parameters broadcast over the spatial axes in conv form, and
``S`` mixes whole maps with a scalar per map pair.
"""

import numpy as np

from .exceptions import DimensionError, NumericError
from .nonlin import ShrinkParams, soft_shrink, soft_shrink_grad, tanh_backward
from .tensor import KernelBank, correlate_grad, correlate_valid

_BETA_MIN = 1e-2


def init_filters(n, m, rng=None, mask=None):
    """Gaussian(0, 1) filters with unit-norm rows (only masked-in entries)."""
    rng = np.random.default_rng(rng)
    W = rng.standard_normal((n, m))
    if mask is not None:
        W *= mask
    W /= np.maximum(np.linalg.norm(W, axis=1, keepdims=True), 1e-12)
    return W


class _Encoder:
    def __init__(self, filters, mask=None):
        if isinstance(filters, KernelBank):
            self.conv = True
            self.bank = filters
            self.n_components = filters.n_out
        else:
            self.conv = False
            W = np.asarray(filters, dtype=np.float64)
            if W.ndim != 2:
                raise DimensionError(f"dense filters must be (n, m), got {W.shape}")
            self.mask = None if mask is None else np.asarray(mask, dtype=bool)
            self.W = W if self.mask is None else W * self.mask
            self.n_components = W.shape[0]

    @property
    def filters(self):
        return self.bank.weights if self.conv else self.W

    def _bc(self, p, ndim):
        # per-component vector -> broadcastable along axis 1
        return p.reshape((1, -1) + (1,) * (ndim - 2))

    def _linear(self, x):
        if self.conv:
            return correlate_valid(x, self.bank)
        if x.shape[-1] != self.W.shape[1]:
            raise DimensionError(f"input has {x.shape[-1]} components, filters expect {self.W.shape[1]}")
        return x @ self.W.T

    def _linear_backward(self, x, g):
        if self.conv:
            gx, gbank = correlate_grad(x, self.bank, g)
            return gx, gbank.weights
        gW = g.T @ x
        if self.mask is not None:
            gW = gW * self.mask
        return g @ self.W, gW

    def _prepare(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == (3 if self.conv else 1)
        return (x[None] if single else x), single

    def __call__(self, x):
        xb, single = self._prepare(x)
        z, _ = self.forward(xb)
        return z[0] if single else z

    def parameters(self):
        raise NotImplementedError

    def apply_update(self, grads, lr):
        """One SGD step ``p -= lr * grad`` on every parameter in ``grads``."""
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for encoder parameter {name}")
        params = self.parameters()
        for name, g in grads.items():
            if name == "beta":
                self.shrink.beta = max(self.shrink.beta - lr * float(g), _BETA_MIN)
            else:
                params[name] -= lr * g
        if self.conv:
            self.bank.weights *= self.bank.mask[:, :, None, None]
        elif self.mask is not None:
            self.W *= self.mask
        self._post_update()

    def _post_update(self):
        pass

    def to_conv(self, in_maps, kernel_size, table_mask=None):
        """Reshape dense patch filters (n, in_maps*k*k) into a kernel bank."""
        if self.conv:
            return self
        W = self.W.reshape(self.n_components, in_maps, kernel_size, kernel_size)
        return self._with_filters(KernelBank(W.copy(), table_mask))

    def _with_filters(self, filters):
        raise NotImplementedError


class TanhEncoder(_Encoder):
    def __init__(self, filters, gain=None, bias=None, mask=None):
        super().__init__(filters, mask)
        n = self.n_components
        self.gain = np.ones(n) if gain is None else np.array(gain, dtype=np.float64)
        self.bias = np.zeros(n) if bias is None else np.array(bias, dtype=np.float64)

    def parameters(self):
        return {"W": self.filters, "gain": self.gain, "bias": self.bias}

    def forward(self, xb):
        a = self._linear(xb)
        h = np.tanh(a + self._bc(self.bias, a.ndim))
        return self._bc(self.gain, h.ndim) * h, (xb, h)

    def backward(self, cache, gz):
        xb, h = cache
        g = self._bc(self.gain, h.ndim)
        axes = tuple(i for i in range(h.ndim) if i != 1)
        grads = {"gain": np.sum(gz * h, axis=axes)}
        ga = tanh_backward(h, gz * g)
        grads["bias"] = np.sum(ga, axis=axes)
        gx, grads["W"] = self._linear_backward(xb, ga)
        return gx, grads

    def _with_filters(self, filters):
        return TanhEncoder(filters, self.gain.copy(), self.bias.copy())


class SiEncoder(_Encoder):
    def __init__(self, filters, S=None, shrink=None, mask=None):
        super().__init__(filters, mask)
        n = self.n_components
        self.S = np.zeros((n, n)) if S is None else np.array(S, dtype=np.float64)
        if self.S.shape != (n, n):
            raise DimensionError(f"S must be ({n}, {n}), got {self.S.shape}")
        np.fill_diagonal(self.S, 0.0)
        self.shrink = ShrinkParams.init(n) if shrink is None else shrink
        if self.shrink.b.shape != (n,):
            raise DimensionError(f"shrink threshold must have shape ({n},)")

    def parameters(self):
        return {"W": self.filters, "S": self.S, "b": self.shrink.b, "beta": self.shrink.beta}

    def _mix(self, s, S=None):
        # (S s) along the component axis, spatially shared in conv form
        S = self.S if S is None else S
        return np.moveaxis(np.tensordot(S, s, axes=([1], [1])), 0, 1)

    def forward(self, xb):
        a = self._linear(xb)
        b = self._bc(self.shrink.b, a.ndim)
        beta = self.shrink.beta
        s1 = soft_shrink(a, b, beta)
        pre = a - self._mix(s1)
        z = soft_shrink(pre, b, beta)
        return z, (xb, a, s1, pre)

    def backward(self, cache, gz):
        xb, a, s1, pre = cache
        b = self._bc(self.shrink.b, a.ndim)
        beta = self.shrink.beta
        axes = tuple(i for i in range(a.ndim) if i != 1)

        dx2, db2, dbeta2 = soft_shrink_grad(pre, b, beta)
        gpre = gz * dx2
        gb = np.sum(gz * db2, axis=axes)
        gbeta = float(np.sum(gz * dbeta2))

        # pre = a - S s1
        gs1 = -self._mix(gpre, self.S.T)
        n = self.n_components
        gS = -np.moveaxis(gpre, 1, 0).reshape(n, -1) @ np.moveaxis(s1, 1, 0).reshape(n, -1).T
        np.fill_diagonal(gS, 0.0)

        dx1, db1, dbeta1 = soft_shrink_grad(a, b, beta)
        ga = gpre + gs1 * dx1
        gb = gb + np.sum(gs1 * db1, axis=axes)
        gbeta += float(np.sum(gs1 * dbeta1))

        gx, gW = self._linear_backward(xb, ga)
        return gx, {"W": gW, "S": gS, "b": gb, "beta": gbeta}

    def _post_update(self):
        np.fill_diagonal(self.S, 0.0)

    def _with_filters(self, filters):
        return SiEncoder(filters, self.S.copy(), ShrinkParams(self.shrink.b.copy(), self.shrink.beta))


def f_tanh(enc, x):
    return enc(x)


def f_si(enc, x):
    return enc(x)


def f_si_conv(enc, x):
    if not enc.conv:
        raise DimensionError("f_si_conv needs an encoder built on a KernelBank")
    return enc(x)


def prediction_error(enc, x, z_star):
    xb, single = enc._prepare(x)
    z, _ = enc.forward(xb)
    e = z - np.asarray(z_star).reshape(z.shape)
    return float(np.sum(e * e))


def encoder_fit_step(enc, x, z_star, lr):
    """One SGD step on ``||z_star - F(x)||^2`` w.r.t. every encoder parameter.

    ``z_star`` is a fixed target. Updates ``enc`` in place and returns the
    squared prediction error measured before the step.
    """
    xb, single = enc._prepare(x)
    z, cache = enc.forward(xb)
    e = z - np.asarray(z_star, dtype=np.float64).reshape(z.shape)
    _, grads = enc.backward(cache, 2.0 * e)
    enc.apply_update(grads, lr)
    return float(np.sum(e * e))
