"""Predictive sparse decomposition, optionally with a discriminative term.

Training alternates, one sample at a time, between

1. inferring the optimal code ``z*`` by FISTA, warm-started from the
   encoder's prediction, on ``C(y, u z + r) + lambda1 ||x - D z||^2 +
   lambda_l1 ||z||_1`` (the classification term only when
   ``discriminative=True``), and
2. one SGD step each on the dictionary (reconstruction loss, then column
   renormalisation), the linear classifier (logistic loss, discriminative
   only) and the encoder (squared prediction error).

``DPSD`` learns from flat patches; ``ConvDPSD`` learns kernel banks from
image regions larger than the kernel, reconstructing each region from
code maps by full convolution.
"""

import logging

import numpy as np
from scipy.sparse.linalg import LinearOperator
from scipy.special import softmax
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import _binio
from .encoder import SiEncoder, TanhEncoder, encoder_fit_step
from .exceptions import ConfigError, DimensionError, NumericError, TrainingError
from .nonlin import ShrinkParams
from .solver import SmoothTerm, fista_solve
from .tensor import KernelBank, correlate_adjoint, correlate_grad, correlate_valid

logger = logging.getLogger(__name__)

_CKPT_MAGIC = b"DPSD"


def make_encoder(kind, filters, mask=None):
    if kind == "si":
        return SiEncoder(filters, mask=mask)
    if kind == "tanh":
        return TanhEncoder(filters, mask=mask)
    raise ConfigError(f"unknown encoder kind {kind!r}")


class DPSD(TransformerMixin, BaseEstimator):
    """Patch-based (discriminative) predictive sparse decomposition.

    Parameters
    ----------
    n_components : int
        Code size (number of dictionary columns).
    encoder : {"si", "tanh"}
    discriminative : bool
        Add the multinomial logistic term to code inference and train the
        linear classifier ``(coef_, intercept_)``. ``fit`` then needs ``y``.
    lambda_l1 : float
        Weight of ``||z||_1``.
    lambda1 : float
        Weight of the reconstruction term inside the discriminative energy.
    lr_dict, lr_encoder, lr_theta : float
        Base learning rates, decayed as ``lr / (1 + t / T)`` with ``T`` the
        number of samples.
    n_iter : int
        Passes over the data.
    scale_lr : bool
        Divide ``lr_encoder`` and ``lr_theta`` by ``max(1, mean ||x||^2)``
        over the training set. Plain SGD on the encoder is only stable for
        steps below about ``2 / ||x||^2``, which large inputs (such as
        contrast-normalised feature maps) violate at the default rates.
    mask : array of bool, shape (n_components, n_features), optional
        Allowed filter entries; applied to encoder rows and dictionary
        columns alike.
    """

    def __init__(
        self,
        n_components=64,
        encoder="si",
        discriminative=False,
        lambda_l1=0.5,
        lambda1=1.0,
        lr_dict=0.01,
        lr_encoder=0.001,
        lr_theta=0.001,
        n_iter=1,
        max_iter=200,
        tol=1e-6,
        scale_lr=False,
        mask=None,
        random_state=None,
    ):
        self.n_components = n_components
        self.encoder = encoder
        self.discriminative = discriminative
        self.lambda_l1 = lambda_l1
        self.lambda1 = lambda1
        self.lr_dict = lr_dict
        self.lr_encoder = lr_encoder
        self.lr_theta = lr_theta
        self.n_iter = n_iter
        self.max_iter = max_iter
        self.tol = tol
        self.scale_lr = scale_lr
        self.mask = mask
        self.random_state = random_state

    # -- shape-specific hooks (overridden by ConvDPSD) ------------------------

    def _check_X(self, X):
        return check_array(X, dtype=np.float64)

    def _init_params(self, X, rng):
        n, m = self.n_components, X.shape[1]
        mask = self._mask(m)
        D = rng.standard_normal((n, m))
        if mask is not None:
            D *= mask
        D = D.T
        D /= np.maximum(np.linalg.norm(D, axis=0), 1e-12)
        W = rng.standard_normal((n, m))
        if mask is not None:
            W *= mask
        W /= np.maximum(np.linalg.norm(W, axis=1, keepdims=True), 1e-12)
        return D, make_encoder(self.encoder, W, mask), n

    def _mask(self, m):
        if self.mask is None:
            return None
        mask = np.asarray(self.mask, dtype=bool)
        if mask.shape != (self.n_components, m):
            raise DimensionError(f"mask must have shape ({self.n_components}, {m}), got {mask.shape}")
        return mask

    def _operator(self, x):
        return self.dictionary_

    def _flat(self, x):
        return x

    def _dict_step(self, x, z, lr):
        e = x - self.dictionary_ @ z
        self.dictionary_ += lr * 2.0 * np.outer(e, z)
        mask = self._mask(x.shape[0])
        if mask is not None:
            self.dictionary_ *= mask.T
        self.dictionary_ /= np.maximum(np.linalg.norm(self.dictionary_, axis=0), 1e-12)
        return self.dictionary_norms()

    def dictionary_norms(self):
        return np.linalg.norm(self.dictionary_, axis=0)

    # -- training -------------------------------------------------------------

    def fit(self, X, y=None):
        X = self._check_X(X)
        if self.discriminative:
            if y is None:
                raise ConfigError("discriminative training needs labels")
            self.classes_, y_idx = np.unique(np.asarray(y), return_inverse=True)
            if len(self.classes_) < 2:
                raise ConfigError("discriminative training needs at least two classes")
        elif y is not None:
            logger.debug("labels ignored: discriminative=False")
        if self.n_components < 1:
            raise ConfigError("n_components must be >= 1")
        for name in ("lr_dict", "lr_encoder", "lr_theta"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")

        rng = np.random.default_rng(self.random_state)
        self.dictionary_, self.encoder_, code_len = self._init_params(X, rng)
        if self.discriminative:
            c = len(self.classes_)
            # unit-variance scores for unit-norm codes
            self.coef_ = rng.standard_normal((c, code_len)) / np.sqrt(code_len)
            self.intercept_ = rng.standard_normal(c) / np.sqrt(code_len)
        else:
            self.coef_ = self.intercept_ = None

        T = len(X)
        t = 0
        energy = float(np.mean(np.sum(X.reshape(T, -1) ** 2, axis=1)))
        self.lr_scale_ = 1.0 / max(1.0, energy) if self.scale_lr else 1.0
        lr_enc, lr_theta = self.lr_encoder * self.lr_scale_, self.lr_theta * self.lr_scale_
        self.history_ = []
        self.n_skipped_ = 0
        self.max_norm_error_ = 0.0
        for epoch in range(self.n_iter):
            objectives, pred_errors = [], []
            for i in rng.permutation(T):
                decay = 1.0 / (1.0 + t / T)
                t += 1
                x = X[i]
                label = int(y_idx[i]) if self.discriminative else None
                try:
                    z_hat = self._flat(self.encoder_(x))
                    res = self._solve(x, label, z_hat)
                except NumericError:
                    self.n_skipped_ += 1
                    continue
                z = res.z
                norms = self._dict_step(x, z, self.lr_dict * decay)
                self.max_norm_error_ = max(self.max_norm_error_, float(np.max(np.abs(norms - 1.0))))
                if self.discriminative:
                    p = softmax(self.coef_ @ z + self.intercept_)
                    p[label] -= 1.0
                    self.coef_ -= lr_theta * decay * np.outer(p, z)
                    self.intercept_ -= lr_theta * decay * p
                err = encoder_fit_step(self.encoder_, x, self._unflat(z), lr_enc * decay)
                if not np.isfinite(err) or not np.all(np.isfinite(self.encoder_.filters)):
                    raise TrainingError(f"encoder training diverged at sample {t}; lower lr_encoder or set scale_lr=True")
                pred_errors.append(err)
                objectives.append(res.objective)
            if not objectives:
                raise TrainingError(f"epoch {epoch}: every sample was skipped")
            self.history_.append(
                {"epoch": epoch, "objective": float(np.mean(objectives)), "prediction_error": float(np.mean(pred_errors))}
            )
            logger.info("epoch %d objective %.5g prediction error %.5g", epoch, np.mean(objectives), np.mean(pred_errors))
        self.rng_state_ = rng.bit_generator.state
        return self

    def _unflat(self, z):
        return z

    def _solve(self, x, label, z0):
        term = SmoothTerm(
            self._flat(x),
            self._operator(x),
            y=label,
            u=self.coef_ if label is not None else None,
            r=self.intercept_ if label is not None else None,
            lambda1=self.lambda1,
        )
        return fista_solve(term, self.lambda_l1, self.max_iter, self.tol, z0=z0)

    # -- inference ------------------------------------------------------------

    def transform(self, X):
        """Encoder predictions ``F(x)``."""
        check_is_fitted(self, "dictionary_")
        X = self._check_X(X)
        return np.stack([self._flat(self.encoder_(x)) for x in X])

    def sparse_encode(self, X, y=None):
        """Optimal codes by FISTA (discriminative energy when ``y`` is given)."""
        check_is_fitted(self, "dictionary_")
        X = self._check_X(X)
        codes = []
        for i, x in enumerate(X):
            label = None
            if y is not None and self.discriminative:
                label = int(np.searchsorted(self.classes_, y[i]))
            codes.append(self._solve(x, label, self._flat(self.encoder_(x))).z)
        return np.stack(codes)

    def reconstruct(self, codes):
        check_is_fitted(self, "dictionary_")
        return np.asarray(codes) @ self.dictionary_.T

    # -- checkpoints ----------------------------------------------------------

    def _arrays(self):
        enc = self.encoder_
        arrays = {"dictionary": self._dict_array(), "W": np.asarray(enc.filters)}
        if isinstance(enc, SiEncoder):
            arrays.update(S=enc.S, b=enc.shrink.b, beta=np.array([enc.shrink.beta]))
        else:
            arrays.update(gain=enc.gain, bias=enc.bias)
        if self.coef_ is not None:
            arrays.update(coef=self.coef_, intercept=self.intercept_, classes=np.asarray(self.classes_))
        if self.mask is not None:
            arrays["mask"] = np.asarray(self.mask, dtype=bool)
        return arrays

    def _dict_array(self):
        return self.dictionary_

    def save(self, path):
        """Write dictionary, encoder, classifier and RNG state to ``path``."""
        check_is_fitted(self, "dictionary_")
        params = {k: v for k, v in self.get_params().items() if k != "mask"}
        meta = {"class": type(self).__name__, "params": params, "rng_state": self.rng_state_, "history": self.history_}
        if getattr(self, "region_shape_", None) is not None:
            meta["region_shape"] = [int(v) for v in self.region_shape_]
        _binio.write_container(path, _CKPT_MAGIC, meta, self._arrays())

    @classmethod
    def load(cls, path):
        meta, arrays = _binio.read_container(path, _CKPT_MAGIC)
        klass = {"DPSD": DPSD, "ConvDPSD": ConvDPSD}[meta["class"]]
        est = klass(**meta["params"], mask=arrays.get("mask"))
        est._restore(arrays, meta)
        est.rng_state_ = meta["rng_state"]
        est.history_ = meta["history"]
        return est

    def _restore(self, arrays, meta):
        self.dictionary_ = arrays["dictionary"]
        self.encoder_ = self._encoder_from(arrays, arrays["W"])
        if "coef" in arrays:
            self.coef_, self.intercept_, self.classes_ = arrays["coef"], arrays["intercept"], arrays["classes"]
        else:
            self.coef_ = self.intercept_ = None

    def _encoder_from(self, arrays, filters):
        mask = arrays.get("mask")
        if self.encoder == "si":
            return SiEncoder(filters, arrays["S"], ShrinkParams(arrays["b"], float(arrays["beta"][0])), mask=mask)
        return TanhEncoder(filters, arrays["gain"], arrays["bias"], mask=mask)


class _ConvDecoder(LinearOperator):
    """Code maps (flattened) -> image region, by full convolution with ``D``."""

    def __init__(self, bank, region_shape):
        self.bank = bank
        self.region_shape = tuple(region_shape)
        c, h, w = self.region_shape
        k = bank.kernel_size
        self.code_shape = (bank.n_out, h - k + 1, w - k + 1)
        super().__init__(np.float64, (c * h * w, int(np.prod(self.code_shape))))

    def _matvec(self, z):
        return correlate_adjoint(z.reshape(self.code_shape), self.bank, self.region_shape).ravel()

    def _rmatvec(self, x):
        return correlate_valid(x.reshape(self.region_shape), self.bank).ravel()

    def _adjoint(self):
        # keep D.T @ v on the fast path
        return _Transposed(self)

    _transpose = _adjoint


class _Transposed(LinearOperator):
    def __init__(self, op):
        self.op = op
        super().__init__(np.float64, op.shape[::-1])

    def _matvec(self, x):
        return self.op._rmatvec(x)

    def _rmatvec(self, z):
        return self.op._matvec(z)


class ConvDPSD(DPSD):
    """Convolutional (D)PSD on image regions of shape (maps, R, R).

    ``mask`` here is the (n_components, maps) connection matrix. Codes are
    maps of shape (n_components, R - k + 1, R - k + 1).
    """

    def __init__(
        self,
        n_components=64,
        kernel_size=7,
        encoder="si",
        discriminative=False,
        lambda_l1=0.5,
        lambda1=1.0,
        lr_dict=0.01,
        lr_encoder=0.001,
        lr_theta=0.001,
        n_iter=1,
        max_iter=200,
        tol=1e-6,
        scale_lr=False,
        mask=None,
        random_state=None,
    ):
        super().__init__(
            n_components=n_components,
            encoder=encoder,
            discriminative=discriminative,
            lambda_l1=lambda_l1,
            lambda1=lambda1,
            lr_dict=lr_dict,
            lr_encoder=lr_encoder,
            lr_theta=lr_theta,
            n_iter=n_iter,
            max_iter=max_iter,
            tol=tol,
            scale_lr=scale_lr,
            mask=mask,
            random_state=random_state,
        )
        self.kernel_size = kernel_size

    def _check_X(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 4:
            raise DimensionError(f"ConvDPSD expects (n, maps, R, R) regions, got shape {X.shape}")
        if X.shape[2] < self.kernel_size or X.shape[3] < self.kernel_size:
            raise DimensionError(f"region {X.shape[2]}x{X.shape[3]} smaller than kernel {self.kernel_size}")
        if not np.all(np.isfinite(X)):
            raise NumericError("regions contain non-finite values")
        return X

    def _conn(self, c):
        if self.mask is None:
            return np.ones((self.n_components, c), dtype=bool)
        mask = np.asarray(self.mask, dtype=bool)
        if mask.shape != (self.n_components, c):
            raise DimensionError(f"mask must have shape ({self.n_components}, {c}), got {mask.shape}")
        return mask

    def _init_params(self, X, rng):
        n, k = self.n_components, self.kernel_size
        c = X.shape[1]
        conn = self._conn(c)
        # same draw order as the patch version so R == k reproduces it
        D = KernelBank(rng.standard_normal((n, c * k * k)).reshape(n, c, k, k), conn).normalize()
        W = KernelBank(rng.standard_normal((n, c * k * k)).reshape(n, c, k, k), conn).normalize()
        self.region_shape_ = X.shape[1:]
        self.code_shape_ = (n, X.shape[2] - k + 1, X.shape[3] - k + 1)
        self._op = _ConvDecoder(D, self.region_shape_)
        return D, make_encoder(self.encoder, W), int(np.prod(self.code_shape_))

    def _operator(self, x):
        if self._op.bank is not self.dictionary_:
            self._op = _ConvDecoder(self.dictionary_, self.region_shape_)
        return self._op

    def _flat(self, x):
        return np.asarray(x).ravel()

    def _unflat(self, z):
        return z.reshape(self.code_shape_)

    def _dict_step(self, x, z, lr):
        zm = z.reshape(self.code_shape_)
        e = x - correlate_adjoint(zm, self.dictionary_, x.shape)
        _, gbank = correlate_grad(e, self.dictionary_, zm)
        # d||e||^2/dD = -2 * gbank
        self.dictionary_.weights += lr * 2.0 * gbank.weights
        self.dictionary_.weights *= self.dictionary_.mask[:, :, None, None]
        self.dictionary_.normalize()
        return self.dictionary_norms()

    def dictionary_norms(self):
        return np.sqrt(np.sum(self.dictionary_.weights**2, axis=(1, 2, 3)))

    def transform(self, X):
        """Encoder predictions as ``(n, n_components, h', w')`` code maps."""
        out = super().transform(X)
        return out.reshape((len(out),) + self.code_shape_)

    def sparse_encode(self, X, y=None):
        out = super().sparse_encode(X, y)
        return out.reshape((len(out),) + self.code_shape_)

    def reconstruct(self, codes):
        check_is_fitted(self, "dictionary_")
        codes = np.asarray(codes).reshape((-1,) + self.code_shape_)
        return correlate_adjoint(codes, self.dictionary_, (len(codes),) + tuple(self.region_shape_))

    def _dict_array(self):
        return self.dictionary_.weights

    def _restore(self, arrays, meta):
        conn = self._conn(arrays["dictionary"].shape[1])
        self.dictionary_ = KernelBank(arrays["dictionary"], conn)
        self.encoder_ = self._encoder_from({**arrays, "mask": None}, KernelBank(arrays["W"], conn))
        if "coef" in arrays:
            self.coef_, self.intercept_, self.classes_ = arrays["coef"], arrays["intercept"], arrays["classes"]
        else:
            self.coef_ = self.intercept_ = None
        c, h, w = meta["region_shape"]
        k = self.kernel_size
        self.region_shape_ = (c, h, w)
        self.code_shape_ = (self.n_components, h - k + 1, w - k + 1)
        self._op = _ConvDecoder(self.dictionary_, self.region_shape_)
