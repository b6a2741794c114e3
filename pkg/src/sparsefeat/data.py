"""Dataset readers, preprocessing pipelines and image export.

CIFAR-10 binary batches are 3073-byte records: a label byte followed by the
R, G and B planes of a 32x32 image. Image directories hold one sub-directory
per class with PGM/PPM files.
"""

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import map_coordinates
from sklearn.datasets import load_sample_images

from ._validation import check_tensor3
from .exceptions import DimensionError, FormatError, LabelError, ParameterError
from .norm import NormConfig, local_cn

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_CLASSES = ("airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck")

_GRAY = np.array([0.299, 0.587, 0.114])
_YUV = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.14713, -0.28886, 0.436],
        [0.615, -0.51499, -0.10001],
    ]
)


@dataclass
class Dataset:
    """Stacked samples ``X`` (n, maps, h, w) with integer labels ``y``."""

    X: np.ndarray
    y: np.ndarray
    class_names: tuple = ()
    split: str = "train"

    def __post_init__(self):
        self.X = np.asarray(self.X)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 4:
            raise DimensionError(f"samples must stack to (n, maps, h, w), got {self.X.shape}")
        if len(self.X) != len(self.y):
            raise LabelError(f"{len(self.X)} samples but {len(self.y)} labels")
        n_classes = len(self.class_names) if self.class_names else int(self.y.max(initial=-1)) + 1
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= n_classes):
            raise LabelError(f"labels must lie in [0, {n_classes})")

    def __len__(self):
        return len(self.y)

    @property
    def samples(self):
        return list(zip(self.X, self.y))

    def subset(self, idx):
        return Dataset(self.X[idx], self.y[idx], self.class_names, self.split)


# -- CIFAR-10 ---------------------------------------------------------------------


def _read_cifar_file(path):
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) % CIFAR_RECORD:
        full = len(buf) // CIFAR_RECORD
        raise FormatError(f"{path}: truncated record at byte offset {full * CIFAR_RECORD} (file size {len(buf)} is not a multiple of {CIFAR_RECORD})")
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(f"{path}: label {labels[bad[0]]} out of range at byte offset {bad[0] * CIFAR_RECORD}")
    X = rec[:, 1:].reshape((-1,) + CIFAR_SHAPE).astype(np.float64) / 255.0
    return X, labels


def load_cifar10(path, split="train"):
    """Read one CIFAR-10 binary file, or every matching batch in a directory.

    For a directory, ``split="train"`` reads ``data_batch_*.bin`` and
    ``split="test"`` reads ``test_batch.bin``, in sorted order.
    """
    if os.path.isdir(path):
        pattern = "data_batch_" if split == "train" else "test_batch"
        files = sorted(f for f in os.listdir(path) if f.startswith(pattern) and f.endswith(".bin"))
        if not files:
            raise FormatError(f"{path}: no {pattern}*.bin files")
        parts = [_read_cifar_file(os.path.join(path, f)) for f in files]
        X = np.concatenate([p[0] for p in parts])
        y = np.concatenate([p[1] for p in parts])
    elif os.path.exists(path):
        X, y = _read_cifar_file(path)
    else:
        raise FormatError(f"{path}: no such file")
    return Dataset(X, y, CIFAR_CLASSES, split)


def write_cifar10(path, X, y):
    """Write images in [0, 1] (n, 3, 32, 32) and labels as CIFAR-10 records."""
    X = np.asarray(X)
    if X.shape[1:] != CIFAR_SHAPE:
        raise DimensionError(f"CIFAR records hold {CIFAR_SHAPE} images, got {X.shape[1:]}")
    pix = np.clip(np.rint(X * 255.0), 0, 255).astype(np.uint8).reshape(len(X), -1)
    rec = np.concatenate([np.asarray(y, dtype=np.uint8)[:, None], pix], axis=1)
    with open(path, "wb") as f:
        f.write(rec.tobytes())


# -- image files --------------------------------------------------------------------


def read_image(path):
    """Read a PGM/PPM file as (maps, h, w) floats in [0, 1]."""
    try:
        with Image.open(path) as im:
            im.load()
            a = np.asarray(im)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise FormatError(f"{path}: cannot decode image ({exc})") from exc
    scale = 65535.0 if a.dtype == np.uint16 else 255.0
    a = a.astype(np.float64) / scale
    if a.ndim == 2:
        return a[None]
    return np.moveaxis(a[..., :3], -1, 0)


def write_pgm(path, image):
    """Write a 2D (or 1xHxW) uint8-range array as binary PGM."""
    a = np.asarray(image)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise DimensionError(f"PGM export needs a single map, got {a.shape}")
    Image.fromarray(np.clip(np.rint(a), 0, 255).astype(np.uint8), mode="L").save(path, format="PPM")


def to_display(image):
    """Min-max a single-map image to 0..255 (constant images map to 128)."""
    a = np.asarray(image, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi == lo:
        return np.full(a.shape, 128.0)
    return (a - lo) / (hi - lo) * 255.0


def load_image_dir(path, transform=None, split="train"):
    """Read ``path/<class>/*.pgm|*.ppm``; classes sorted by name."""
    if not os.path.isdir(path):
        raise FormatError(f"{path}: not a directory")
    classes = sorted(d for d in os.listdir(path) if os.path.isdir(os.path.join(path, d)))
    if not classes:
        raise FormatError(f"{path}: no class directories")
    X, y = [], []
    for label, name in enumerate(classes):
        folder = os.path.join(path, name)
        for f in sorted(os.listdir(folder)):
            if f.lower().endswith((".pgm", ".ppm", ".pnm")):
                img = read_image(os.path.join(folder, f))
                X.append(transform(img) if transform else img)
                y.append(label)
    if not X:
        raise FormatError(f"{path}: no PGM/PPM images")
    shapes = {x.shape for x in X}
    if len(shapes) > 1:
        raise DimensionError(f"{path}: images have differing shapes {sorted(shapes)}; give a resizing transform")
    return Dataset(np.stack(X), np.array(y), tuple(classes), split)


# -- conversions ----------------------------------------------------------------------


def grayscale(image):
    """Luma ``0.299 R + 0.587 G + 0.114 B``; single-map input passes through."""
    t = check_tensor3(image, "image", allow_batch=False)
    if t.shape[0] == 1:
        return t
    if t.shape[0] != 3:
        raise DimensionError(f"grayscale needs 1 or 3 maps, got {t.shape[0]}")
    return np.tensordot(_GRAY, t, axes=1)[None]


def rgb_to_yuv(image):
    """BT.601 YUV."""
    t = check_tensor3(image, "image", allow_batch=False)
    if t.shape[0] != 3:
        raise DimensionError(f"YUV conversion needs 3 maps, got {t.shape[0]}")
    return np.tensordot(_YUV, t, axes=1)


def resize(image, height, width):
    """Bilinear resize of every map; pixel centres are aligned at the corners."""
    t = check_tensor3(image, "image", allow_batch=False)
    _, h, w = t.shape
    rows = np.linspace(0, h - 1, height)
    cols = np.linspace(0, w - 1, width)
    grid = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([map_coordinates(m, grid, order=1, mode="nearest") for m in t])


# -- pipelines --------------------------------------------------------------------------


_OPS = ("grayscale", "yuv", "resize", "local_cn", "standardize")


@dataclass
class PreprocSpec:
    """Ordered preprocessing ops, shape-checked against ``input_shape``.

    Ops are tuples: ``("grayscale",)``, ``("yuv",)``, ``("resize", h, w)``,
    ``("local_cn", mode, window, sigma, maps)`` and ``("standardize", maps)``.
    ``maps`` selects channels (``None`` for all). Standardisation statistics
    are fitted with :meth:`fit` and reused afterwards.
    """

    input_shape: tuple
    ops: list = field(default_factory=list)

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.ops = [tuple(op) for op in self.ops]
        self.stats_ = None
        self.output_shape = self._check()

    def _check(self):
        c, h, w = self.input_shape
        for op in self.ops:
            name = op[0]
            if name not in _OPS:
                raise ParameterError(f"unknown preprocessing op {name!r}")
            if name == "grayscale":
                if c not in (1, 3):
                    raise DimensionError(f"grayscale needs 1 or 3 maps, got {c}")
                c = 1
            elif name == "yuv":
                if c != 3:
                    raise DimensionError(f"yuv needs 3 maps, got {c}")
            elif name == "resize":
                h, w = int(op[1]), int(op[2])
            elif name == "local_cn":
                window = op[2]
                if window > min(h, w):
                    raise DimensionError(f"norm window {window} larger than {h}x{w}")
                if op[1] == "valid":
                    h, w = h - window + 1, w - window + 1
        return (c, h, w)

    def fit(self, X):
        """Fit standardisation statistics on training images (n, maps, h, w)."""
        self.stats_ = None
        stats = []
        Z = [self._apply(x, upto_standardize=True) for x in X]
        Z = np.stack(Z) if Z else None
        for op in self.ops:
            if op[0] == "standardize":
                maps = op[1] if len(op) > 1 and op[1] is not None else list(range(Z.shape[1]))
                mu = Z[:, maps].mean(axis=(0, 2, 3))
                sd = Z[:, maps].std(axis=(0, 2, 3))
                stats.append((list(maps), mu, np.where(sd > 0, sd, 1.0)))
        self.stats_ = stats
        return self

    def _apply(self, x, upto_standardize=False):
        t = check_tensor3(x, "image", allow_batch=False)
        if t.shape != self.input_shape:
            raise DimensionError(f"image shape {t.shape} does not match {self.input_shape}")
        k = 0
        for op in self.ops:
            name = op[0]
            if name == "grayscale":
                t = grayscale(t)
            elif name == "yuv":
                t = rgb_to_yuv(t)
            elif name == "resize":
                t = resize(t, op[1], op[2])
            elif name == "local_cn":
                mode, window, sigma = op[1], op[2], op[3]
                maps = op[4] if len(op) > 4 and op[4] is not None else range(t.shape[0])
                cfg = NormConfig(window, sigma)
                maps = list(maps)
                if mode == "valid":
                    t = np.concatenate([local_cn(t[[m]], cfg, "valid") for m in maps])
                else:
                    t = t.copy()
                    for m in maps:
                        t[m] = local_cn(t[[m]], cfg, "same")[0]
            elif name == "standardize":
                if upto_standardize:
                    return t
                if self.stats_ is None:
                    raise ParameterError("standardize op needs fit() on the training split first")
                maps, mu, sd = self.stats_[k]
                k += 1
                t = t.copy()
                t[maps] = (t[maps] - mu[:, None, None]) / sd[:, None, None]
        return t

    def transform_one(self, x):
        return self._apply(x)

    def transform(self, X):
        X = np.asarray(X)
        if X.ndim == 3:
            return self._apply(X)
        return np.stack([self._apply(x) for x in X])


def caltech_spec(input_shape):
    return PreprocSpec(input_shape, [("grayscale",), ("resize", 151, 151), ("local_cn", "valid", 9, 1.6, None)])


def preprocess_caltech(image):
    """Grayscale, bilinear squash to 151x151, valid-mode 9x9 CN: 1x143x143."""
    t = check_tensor3(image, "image", allow_batch=False)
    return caltech_spec(t.shape).transform_one(t)


class CifarPreprocessor:
    """RGB -> YUV; Y locally normalised, U/V standardised with training statistics."""

    def __init__(self, window=9, sigma=1.6):
        self.spec = PreprocSpec(
            CIFAR_SHAPE,
            [("yuv",), ("local_cn", "same", window, sigma, [0]), ("standardize", [1, 2])],
        )

    def fit(self, X):
        self.spec.fit(X)
        return self

    def transform(self, X):
        return self.spec.transform(X)

    def fit_transform(self, X):
        return self.fit(X).transform(X)

    @property
    def uv_stats(self):
        if self.spec.stats_ is None:
            return None
        _, mu, sd = self.spec.stats_[0]
        return mu, sd


def preprocess_cifar(image, preprocessor):
    """Preprocess one 3x32x32 RGB image with a fitted :class:`CifarPreprocessor`."""
    t = check_tensor3(image, "image", allow_batch=False)
    if t.shape != CIFAR_SHAPE:
        raise DimensionError(f"CIFAR images are {CIFAR_SHAPE}, got {t.shape}")
    return preprocessor.transform(t)


# -- export -------------------------------------------------------------------------------


def filter_grid(bank, per_row=8):
    """Tile every connected kernel of ``bank`` into a uint8 image."""
    if hasattr(bank, "kernels"):
        ks = [np.asarray(k, dtype=np.float64) for _, _, k in bank.kernels()]
    else:
        ks = [np.asarray(k, dtype=np.float64) for k in np.asarray(bank)]
    if not ks:
        raise ParameterError("empty kernel bank")
    k = ks[0].shape[0]
    rows = -(-len(ks) // per_row)
    cols = min(per_row, len(ks))
    grid = np.zeros((rows * (k + 1) - 1, cols * (k + 1) - 1))
    for i, kern in enumerate(ks):
        r, c = divmod(i, per_row)
        lo, hi = kern.min(), kern.max()
        tile = np.full(kern.shape, 128.0) if hi == lo else (kern - lo) / (hi - lo) * 255.0
        grid[r * (k + 1) : r * (k + 1) + k, c * (k + 1) : c * (k + 1) + k] = tile
    return np.rint(grid).astype(np.uint8)


def export_filter_grid(bank, path, per_row=8):
    """Write :func:`filter_grid` as a PGM file; returns the pixel array."""
    grid = filter_grid(bank, per_row)
    write_pgm(path, grid)
    return grid


# -- synthetic data -------------------------------------------------------------------------


def _shape_mask(kind, size, rng):
    yy, xx = np.mgrid[:size, :size] - (size - 1) / 2.0
    if kind == 0:
        w = max(1, size // 5)
        return ((np.abs(yy) <= w / 2 + 0.01) | (np.abs(xx) <= w / 2 + 0.01)).astype(float)
    r = np.hypot(yy, xx)
    return ((r <= size / 2.0) & (r >= size / 2.0 - max(1.5, size / 5))).astype(float)


def synthetic_cifar(n, random_state=None, noise=0.04, contrast=(0.5, 0.9), size=(14, 22)):
    """Seeded 2-class 3x32x32 images in [0, 1]: a cross or a ring on a natural background.

    Backgrounds are random crops of the bundled scikit-learn sample photos;
    each object gets a random colour, size, position and contrast.
    """
    rng = np.random.default_rng(random_state)
    photos = [np.moveaxis(im.astype(np.float64) / 255.0, -1, 0) for im in load_sample_images().images]
    X = np.empty((n,) + CIFAR_SHAPE)
    y = rng.integers(0, 2, size=n)
    for i in range(n):
        p = photos[rng.integers(len(photos))]
        a, b = rng.integers(p.shape[1] - 96), rng.integers(p.shape[2] - 96)
        bg = resize(p[:, a : a + 96, b : b + 96], 32, 32)
        side = int(rng.integers(*size))
        r0, c0 = rng.integers(0, 32 - side, size=2)
        mask = _shape_mask(y[i], side, rng) * rng.uniform(*contrast)
        colour = rng.uniform(0, 1, size=3)
        img = bg.copy()
        win = img[:, r0 : r0 + side, c0 : c0 + side]
        img[:, r0 : r0 + side, c0 : c0 + side] = win * (1 - mask) + colour[:, None, None] * mask
        img += noise * rng.standard_normal(img.shape)
        X[i] = np.clip(img, 0.0, 1.0)
    return X, y


def sample_crops(n, size, random_state=None, side=None):
    """Grayscale ``1 x size x size`` crops of the bundled sample photos.

    ``side="left"`` or ``"right"`` keeps crops inside that half of each
    photo, so the two halves give disjoint train and held-out crops.
    """
    rng = np.random.default_rng(random_state)
    photos = [np.tensordot(_GRAY, np.moveaxis(im.astype(np.float64) / 255.0, -1, 0), axes=1) for im in load_sample_images().images]
    out = []
    for _ in range(n):
        p = photos[rng.integers(len(photos))]
        half = p.shape[1] // 2
        lo, hi = {None: (0, p.shape[1]), "left": (0, half), "right": (half, p.shape[1])}[side]
        a = rng.integers(p.shape[0] - size)
        b = rng.integers(lo, hi - size)
        out.append(p[a : a + size, b : b + size][None])
    return np.stack(out)
