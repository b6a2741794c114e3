"""Feature-map tensors, kernel banks and valid-mode cross-correlation.

A feature-map stack is a plain float array of shape ``(maps, h, w)``; every
operation here also accepts a leading batch axis ``(n, maps, h, w)``.
Kernels are applied without flipping (cross-correlation).
"""

import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._validation import as_batch, check_tensor3
from .exceptions import ConfigError, DimensionError, FormatError

_MAGIC = b"T3"
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass
class ConnectionTable:
    """Sparse input-to-output map connectivity as ``(in_map, out_map)`` pairs."""

    entries: np.ndarray
    n_in: int
    n_out: int

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.int64).reshape(-1, 2)
        if self.entries.size:
            if self.entries[:, 0].min() < 0 or self.entries[:, 0].max() >= self.n_in:
                raise ConfigError("connection table input index out of range")
            if self.entries[:, 1].min() < 0 or self.entries[:, 1].max() >= self.n_out:
                raise ConfigError("connection table output index out of range")
        if len({tuple(e) for e in self.entries.tolist()}) != len(self.entries):
            raise ConfigError("duplicate (in_map, out_map) pair in connection table")

    @classmethod
    def full(cls, n_in, n_out):
        q, p = np.meshgrid(np.arange(n_in), np.arange(n_out), indexing="ij")
        return cls(np.stack([q.ravel(), p.ravel()], axis=1), n_in, n_out)

    @classmethod
    def random(cls, n_in, n_out, fan_in, rng):
        """Each output map reads ``fan_in`` distinct input maps chosen at random."""
        if not 1 <= fan_in <= n_in:
            raise ConfigError(f"fan_in={fan_in} must lie in [1, {n_in}]")
        rng = np.random.default_rng(rng)
        pairs = []
        for p in range(n_out):
            for q in np.sort(rng.choice(n_in, size=fan_in, replace=False)):
                pairs.append((q, p))
        return cls(np.array(pairs), n_in, n_out)

    @classmethod
    def random_fan_out(cls, n_in, n_out, fan_out, rng):
        """Input map ``q`` feeds ``fan_out[q]`` distinct random output maps.

        Used for the colour first stage, where Y feeds every output and U, V
        each feed a random subset.
        """
        if len(fan_out) != n_in:
            raise ConfigError("fan_out needs one entry per input map")
        rng = np.random.default_rng(rng)
        pairs = []
        for q, k in enumerate(fan_out):
            if not 1 <= k <= n_out:
                raise ConfigError(f"fan_out[{q}]={k} must lie in [1, {n_out}]")
            for p in np.sort(rng.choice(n_out, size=k, replace=False)):
                pairs.append((q, p))
        return cls(np.array(pairs), n_in, n_out)

    def mask(self):
        """Boolean connectivity matrix of shape (n_out, n_in)."""
        m = np.zeros((self.n_out, self.n_in), dtype=bool)
        m[self.entries[:, 1], self.entries[:, 0]] = True
        return m

    def fan_in(self):
        return self.mask().sum(axis=1)

    def __len__(self):
        return len(self.entries)


@dataclass
class KernelBank:
    """Kernels ``weights[p, q]`` connecting input map q to output map p.

    Unconnected pairs are held at zero and receive zero gradient.
    """

    weights: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights)
        if self.weights.ndim != 4 or self.weights.shape[2] != self.weights.shape[3]:
            raise DimensionError(f"kernel bank must be (n_out, n_in, k, k), got {self.weights.shape}")
        if self.mask is None:
            self.mask = np.ones(self.weights.shape[:2], dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.weights.shape[:2]:
            raise DimensionError("kernel mask must have shape (n_out, n_in)")
        self.weights = self.weights * self.mask[:, :, None, None]

    @classmethod
    def from_table(cls, table, kernel_size, rng=None, dtype=np.float64):
        """Gaussian(0, 1) kernels, each unit-normalised over its connected inputs."""
        rng = np.random.default_rng(rng)
        w = rng.standard_normal((table.n_out, table.n_in, kernel_size, kernel_size)).astype(dtype)
        bank = cls(w, table.mask())
        bank.normalize()
        return bank

    @property
    def n_out(self):
        return self.weights.shape[0]

    @property
    def n_in(self):
        return self.weights.shape[1]

    @property
    def kernel_size(self):
        return self.weights.shape[2]

    def normalize(self):
        """Scale each output map's kernel set to unit L2 norm (in place)."""
        norms = np.sqrt(np.sum(self.weights**2, axis=(1, 2, 3), keepdims=True))
        self.weights /= np.where(norms > 0, norms, 1.0)
        return self

    def copy(self):
        return KernelBank(self.weights.copy(), self.mask.copy())

    def kernels(self):
        """Iterate ``(out_map, in_map, kernel)`` over connected pairs."""
        for p, q in zip(*np.nonzero(self.mask)):
            yield int(p), int(q), self.weights[p, q]


def _im2col(x, k):
    # (n, c, h, w) -> (n, h', w', c*k*k)
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    n, c, ho, wo = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho, wo, c * k * k)


def correlate_valid(x, bank, n_out=None):
    """Valid-mode cross-correlation ``out[p] = sum_q x[q] (*) W[p, q]``.

    ``x`` is (maps, h, w) or batched (n, maps, h, w).
    """
    x = check_tensor3(x, "input")
    xb, single = as_batch(x)
    if n_out is not None and n_out != bank.n_out:
        raise ConfigError(f"bank has {bank.n_out} output maps, expected {n_out}")
    if xb.shape[1] != bank.n_in:
        raise ConfigError(f"input has {xb.shape[1]} maps, bank expects {bank.n_in}")
    k = bank.kernel_size
    if k > xb.shape[2] or k > xb.shape[3]:
        raise DimensionError(f"kernel {k}x{k} larger than input {xb.shape[2]}x{xb.shape[3]}")
    cols = _im2col(xb, k)
    out = cols @ bank.weights.reshape(bank.n_out, -1).T
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    return out[0] if single else out


def correlate_adjoint(grad_out, bank, in_shape):
    """Adjoint of :func:`correlate_valid` with respect to its input.

    Equivalent to a full convolution of ``grad_out`` with the kernels, so it
    doubles as the decoder for convolutional sparse coding.
    """
    gb, single = as_batch(np.asarray(grad_out))
    k = bank.kernel_size
    h, w = in_shape[-2:]
    if gb.shape[2] != h - k + 1 or gb.shape[3] != w - k + 1 or gb.shape[1] != bank.n_out:
        raise DimensionError(f"grad_out shape {gb.shape[1:]} does not match forward output of {in_shape}")
    padded = np.pad(gb, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
    flipped = bank.weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    cols = _im2col(padded, k)
    gx = cols @ flipped.reshape(bank.n_in, -1).T
    gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
    return gx[0] if single else gx


def correlate_grad(x, bank, grad_out):
    """Gradients of :func:`correlate_valid` w.r.t. its input and kernels.

    Returns ``(grad_input, grad_kernels)`` where ``grad_kernels`` is a
    :class:`KernelBank` whose unconnected entries are zero.
    """
    x = np.asarray(x)
    xb, single = as_batch(x)
    gb = np.asarray(grad_out)
    gb = gb[None] if single else gb
    k = bank.kernel_size
    expected = (xb.shape[0], bank.n_out, xb.shape[2] - k + 1, xb.shape[3] - k + 1)
    if gb.shape != expected:
        raise DimensionError(f"grad_out shape {gb.shape} does not match forward output {expected}")
    cols = _im2col(xb, k)
    gw = gb.transpose(1, 0, 2, 3).reshape(bank.n_out, -1) @ cols.reshape(-1, cols.shape[-1])
    gw = gw.reshape(bank.weights.shape)
    gx = correlate_adjoint(gb, bank, xb.shape)
    return (gx[0] if single else gx), KernelBank(gw, bank.mask)


def save_tensor(path, t):
    """Write a Tensor3 as a 16-byte header followed by little-endian data."""
    t = np.asarray(t)
    if t.ndim != 3:
        raise DimensionError("save_tensor expects a (maps, h, w) array")
    dt = t.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise FormatError(f"unsupported dtype {t.dtype}")
    with open(path, "wb") as f:
        f.write(_MAGIC + struct.pack("<H3I", _DTYPE_CODES[dt], *t.shape))
        f.write(np.ascontiguousarray(t, dtype=dt).tobytes())


def load_tensor(path):
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) != 16 or header[:2] != _MAGIC:
            raise FormatError(f"{path}: not a tensor file")
        code, m, h, w = struct.unpack("<H3I", header[2:])
        if code not in _CODE_DTYPES:
            raise FormatError(f"{path}: unknown dtype code {code}")
        dt = _CODE_DTYPES[code]
        data = f.read()
    if len(data) != m * h * w * dt.itemsize:
        raise FormatError(f"{path}: expected {m * h * w * dt.itemsize} data bytes, got {len(data)}")
    return np.frombuffer(data, dtype=dt).reshape(m, h, w).astype(dt.newbyteorder("="))
