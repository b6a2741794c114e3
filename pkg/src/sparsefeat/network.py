"""Multi-stage sparse convolutional networks and their training protocols.

A stage is ``encoder -> |.| -> {N, pool}`` with the normalization placed
before or after the pooling (or omitted). Stages stack; the last one may use
pyramid pooling, whose flat output feeds the logistic head.

Protocol strings follow the usual table notation: one token per stage from
``R`` (random), ``U`` (unsupervised PSD) or ``D`` (discriminative PSD), an
optional ``c`` for convolutional pretraining (first stage only), an optional
``+`` for global supervised fine-tuning of that stage, and an optional
``L1`` after ``+`` for sparse-state training. ``"D+D+"``, ``"UcU"``,
``"R+L1R+L1"``. A single token is applied to every stage (``c`` only to
the first).
"""

import copy
import csv
import logging
import re
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import _binio
from ._validation import check_tensor3
from .classifier import classifier_train
from .dpsd import DPSD, ConvDPSD
from .encoder import SiEncoder, TanhEncoder
from .exceptions import ConfigError, DimensionError, NumericError
from .nonlin import ShrinkParams, abs_rectify_backward
from .norm import NormConfig, local_cn_backward, local_cn_forward
from .pooling import PoolSpec, PyramidSpec, pool_backward, pool_forward, pyramid_backward, pyramid_forward
from .tensor import ConnectionTable, KernelBank

logger = logging.getLogger(__name__)

_MODEL_MAGIC = b"SPCN"


# -- configuration --------------------------------------------------------------


@dataclass
class StageConfig:
    encoder: str = "si"
    n_out: int = 64
    kernel_size: int = 9
    fan_in: int = None
    fan_out: tuple = None
    norm: str = "before-pool"
    pool: object = field(default_factory=lambda: PoolSpec("avg", 2, 2))
    norm_window: int = 9
    norm_sigma: float = 1.6

    def __post_init__(self):
        if self.encoder not in ("si", "tanh"):
            raise ConfigError(f"unknown encoder {self.encoder!r}")
        if self.norm not in ("before-pool", "after-pool", "none"):
            raise ConfigError(f"unknown norm placement {self.norm!r}")
        if isinstance(self.pool, dict):
            self.pool = _pool_from_dict(self.pool)
        if self.fan_in is not None and self.fan_out is not None:
            raise ConfigError("give fan_in or fan_out, not both")
        if self.fan_out is not None:
            self.fan_out = tuple(int(v) for v in self.fan_out)

    @property
    def norm_config(self):
        return NormConfig(self.norm_window, self.norm_sigma)

    @property
    def pyramid(self):
        return isinstance(self.pool, PyramidSpec)

    def to_dict(self):
        d = asdict(self)
        d["pool"] = _pool_to_dict(self.pool)
        if self.fan_out is not None:
            d["fan_out"] = list(self.fan_out)
        return d

    def output_shape(self, in_shape):
        """Closed-form output shape for input ``(maps, h, w)``."""
        c, h, w = in_shape
        k = self.kernel_size
        if k > h or k > w:
            raise DimensionError(f"kernel {k} larger than stage input {h}x{w}")
        h, w = h - k + 1, w - k + 1
        if self.norm != "none" and self.norm_window > min(h, w) and self.norm == "before-pool":
            raise DimensionError(f"norm window {self.norm_window} larger than {h}x{w}")
        if self.pyramid:
            return (self.pool.output_length(self.n_out, h, w),)
        h, w = self.pool.output_size(h), self.pool.output_size(w)
        if self.norm == "after-pool" and self.norm_window > min(h, w):
            raise DimensionError(f"norm window {self.norm_window} larger than pooled {h}x{w}")
        return (self.n_out, h, w)

    def pre_pool_shape(self, in_shape):
        return (self.n_out, in_shape[1] - self.kernel_size + 1, in_shape[2] - self.kernel_size + 1)


def _pool_to_dict(p):
    if isinstance(p, PyramidSpec):
        return {"kind": "pyramid", "levels": [list(lv) for lv in p.levels]}
    return {"kind": p.kind, "window": p.window, "stride": p.stride}


def _pool_from_dict(d):
    if d["kind"] == "pyramid":
        return PyramidSpec(tuple(tuple(lv) for lv in d["levels"]))
    return PoolSpec(d["kind"], d["window"], d["stride"])


def shape_chain(input_shape, stages):
    """Validate an architecture and return the shape after every stage."""
    shapes = [tuple(input_shape)]
    for i, cfg in enumerate(stages):
        if len(shapes[-1]) != 3:
            raise ConfigError(f"stage {i} follows a pyramid-pooled (flat) stage")
        if cfg.fan_in is not None and cfg.fan_in > shapes[-1][0]:
            raise ConfigError(f"stage {i} fan_in {cfg.fan_in} exceeds {shapes[-1][0]} input maps")
        if cfg.fan_out is not None and len(cfg.fan_out) != shapes[-1][0]:
            raise ConfigError(f"stage {i} fan_out needs {shapes[-1][0]} entries")
        shapes.append(cfg.output_shape(shapes[-1]))
    return shapes


@dataclass
class StageProtocol:
    init: str = "R"
    conv: bool = False
    finetune: bool = False
    sparse: bool = False


_TOKEN = re.compile(r"([RUD])(c?)(\+?)(L1)?")


def parse_protocol(text, n_stages):
    """Parse a protocol string into one :class:`StageProtocol` per stage."""
    tokens, pos = [], 0
    s = text.replace("_", "").replace(" ", "")
    while pos < len(s):
        m = _TOKEN.match(s, pos)
        if not m or m.end() == pos:
            raise ConfigError(f"cannot parse protocol {text!r} at position {pos}")
        init, c, plus, l1 = m.groups()
        if l1 and not plus:
            raise ConfigError(f"protocol {text!r}: L1 sparse-state training needs '+'")
        tokens.append(StageProtocol(init, bool(c), bool(plus), bool(l1)))
        pos = m.end()
    if not tokens:
        raise ConfigError("empty protocol")
    if len(tokens) == 1 and n_stages > 1:
        # a single token covers every stage; 'c' stays on the first one
        rest = {**asdict(tokens[0]), "conv": False}
        tokens = tokens + [StageProtocol(**rest) for _ in range(n_stages - 1)]
    if len(tokens) != n_stages:
        raise ConfigError(f"protocol {text!r} has {len(tokens)} stage tokens for {n_stages} stages")
    for i, t in enumerate(tokens):
        if t.conv and i != 0:
            raise ConfigError("convolutional pretraining is only supported on the first stage")
        if t.conv and t.init == "R":
            raise ConfigError("'c' needs a pretrained stage (U or D)")
    return tokens


# -- architectures --------------------------------------------------------------


def caltech_arch(pyramid=False, encoder="si"):
    """Two stages on 1x143x143: 64x26x26 then 256x4x4 (or a 4-level pyramid)."""
    pool2 = PyramidSpec(((6, 4), (8, 5), (10, 8), (18, 18))) if pyramid else PoolSpec("avg", 6, 4)
    return (1, 143, 143), [
        StageConfig(encoder, 64, 9, norm="before-pool", pool=PoolSpec("avg", 10, 5)),
        StageConfig(encoder, 256, 9, fan_in=16, norm="before-pool", pool=pool2),
    ]


def cifar_arch(pool="max", encoder="si", width=1.0):
    """Two stages on 3x32x32 YUV: 64x12x12 then 256x4x4.

    ``pool="max"`` puts N after max pooling; ``"avg"`` puts N before average
    pooling. ``width=0.5`` halves every map count and fan-in.
    """
    n1, n2 = int(64 * width), int(256 * width)
    uv = int(16 * width)
    fan2 = int(32 * width)
    if pool == "max":
        p1, p2, norm = PoolSpec("max", 4, 2), PoolSpec("max", 3, 1), "after-pool"
    else:
        p1, p2, norm = PoolSpec("avg", 4, 2), PoolSpec("avg", 3, 1), "before-pool"
    return (3, 32, 32), [
        StageConfig(encoder, n1, 7, fan_out=(n1, uv, uv), norm=norm, pool=p1),
        StageConfig(encoder, n2, 7, fan_in=fan2, norm=norm, pool=p2, norm_window=3),
    ]


def desk_arch(pyramid=False, encoder="si"):
    """Halved CIFAR-sized network with N before average pooling.

    Stage 2 pre-pool maps are 6x6; the pyramid concatenates 4x4, 3x3, 2x2
    and 1x1 average pools.
    """
    shape, stages = cifar_arch("avg", encoder, width=0.5)
    if pyramid:
        stages[1].pool = PyramidSpec(((3, 1), (4, 2), (6, 4), (6, 6)))
    return shape, stages


def inversion_arch(cn=True, encoder="si"):
    """Two stages on 1x143x143: 64x66x66 then 128x28x28, N optional."""
    norm = "before-pool" if cn else "none"
    return (1, 143, 143), [
        StageConfig(encoder, 64, 9, norm=norm, pool=PoolSpec("avg", 5, 2)),
        StageConfig(encoder, 128, 9, fan_in=32, norm=norm, pool=PoolSpec("avg", 4, 2)),
    ]


def toy_arch(pyramid=False, encoder="si", norm="before-pool", pool="avg"):
    """Tiny 1x12x12 network for gradient checks and smoke tests."""
    if pyramid:
        p2 = PyramidSpec(((2, 1), (3, 3)))
    elif norm == "after-pool":
        p2 = PoolSpec(pool, 1, 1)  # keep 3x3 maps for the 3x3 norm window
    else:
        p2 = PoolSpec(pool, 2, 2)
    return (1, 12, 12), [
        StageConfig(encoder, 3, 3, norm=norm, pool=PoolSpec(pool, 2, 2), norm_window=3),
        StageConfig(encoder, 4, 3, fan_in=2, norm=norm, pool=p2, norm_window=3),
    ]


ARCHS = {
    "caltech": lambda **kw: caltech_arch(**kw),
    "caltech-pyramid": lambda **kw: caltech_arch(pyramid=True, **kw),
    "cifar": lambda **kw: cifar_arch("max", **kw),
    "cifar-avg": lambda **kw: cifar_arch("avg", **kw),
    "cifar-half": lambda **kw: cifar_arch("max", width=0.5, **kw),
    "desk": lambda **kw: desk_arch(**kw),
    "desk-pyramid": lambda **kw: desk_arch(pyramid=True, **kw),
    "inversion": lambda **kw: inversion_arch(cn=True, **kw),
    "inversion-nocn": lambda **kw: inversion_arch(cn=False, **kw),
    "toy": lambda **kw: toy_arch(**kw),
}


def get_arch(name, encoder="si"):
    if name not in ARCHS:
        raise ConfigError(f"unknown architecture {name!r}; choose from {sorted(ARCHS)}")
    return ARCHS[name](encoder=encoder)


# -- model ----------------------------------------------------------------------


class Stage:
    """One encoder/rectify/normalize/pool stage with forward and backward."""

    def __init__(self, cfg, in_shape, table, encoder):
        self.cfg = cfg
        self.in_shape = tuple(in_shape)
        self.table = table
        self.encoder = encoder
        self.out_shape = cfg.output_shape(self.in_shape)

    @classmethod
    def random(cls, cfg, in_shape, rng):
        c = in_shape[0]
        if cfg.fan_out is not None:
            table = ConnectionTable.random_fan_out(c, cfg.n_out, cfg.fan_out, rng)
        elif cfg.fan_in is not None:
            table = ConnectionTable.random(c, cfg.n_out, cfg.fan_in, rng)
        else:
            table = ConnectionTable.full(c, cfg.n_out)
        bank = KernelBank.from_table(table, cfg.kernel_size, rng)
        enc = SiEncoder(bank) if cfg.encoder == "si" else TanhEncoder(bank)
        return cls(cfg, in_shape, table, enc)

    def ops(self):
        order = ["enc", "abs"]
        if self.cfg.norm == "before-pool":
            order += ["norm", "pool"]
        elif self.cfg.norm == "after-pool":
            order += ["pool", "norm"]
        else:
            order += ["pool"]
        return order

    def forward(self, xb):
        """Returns ``(out, cache)``; ``cache["states"]`` maps op name to its output."""
        caches, states = [], {}
        h = xb
        for op in self.ops():
            if op == "enc":
                h, c = self.encoder.forward(h)
            elif op == "abs":
                c = h
                h = np.abs(h)
            elif op == "norm":
                h, c = local_cn_forward(h, self.cfg.norm_config)
            else:
                if self.cfg.pyramid:
                    h, c = pyramid_forward(h, self.cfg.pool)
                else:
                    h, c = pool_forward(h, self.cfg.pool)
            caches.append(c)
            states[op] = h
        return h, {"caches": caches, "states": states}

    def backward(self, grad, cache, extra=None):
        """Backprop ``grad`` through the stage.

        ``extra`` maps an op name to an additional gradient on that op's
        output (used for L1 penalties on internal states).
        """
        extra = extra or {}
        enc_grads = None
        for op, c in zip(reversed(self.ops()), reversed(cache["caches"])):
            if op in extra:
                grad = grad + extra[op]
            if op == "enc":
                grad, enc_grads = self.encoder.backward(c, grad)
            elif op == "abs":
                grad = abs_rectify_backward(c, grad)
            elif op == "norm":
                grad = local_cn_backward(grad, c, self.cfg.norm_config)
            elif self.cfg.pyramid:
                grad = pyramid_backward(grad, c)
            else:
                grad = pool_backward(grad, c)
        return grad, enc_grads


class Network:
    """Stacked stages plus a linear head ``logits = u @ features + r``."""

    def __init__(self, input_shape, stages, n_classes):
        self.input_shape = tuple(input_shape)
        self.stages = stages
        self.n_classes = n_classes
        self.n_features = int(np.prod(stages[-1].out_shape))
        self.u = np.zeros((n_classes, self.n_features))
        self.r = np.zeros(n_classes)

    @classmethod
    def random(cls, input_shape, configs, n_classes, rng):
        shapes = shape_chain(input_shape, configs)
        stages = [Stage.random(cfg, shapes[i], rng) for i, cfg in enumerate(configs)]
        return cls(input_shape, stages, n_classes)

    @property
    def configs(self):
        return [s.cfg for s in self.stages]

    def features(self, xb, upto=None):
        """Stage outputs for a batch; ``upto`` stops after that many stages."""
        h = xb
        for s in self.stages[:upto]:
            h, _ = s.forward(h)
        return h

    def forward(self, xb):
        caches = []
        h = xb
        for s in self.stages:
            h, c = s.forward(h)
            caches.append(c)
        feats = h.reshape(len(xb), -1)
        logits = feats @ self.u.T + self.r
        return feats, logits, caches

    def backward(self, g_logits, feats, caches, extras=None, need_input_grad=False, trainable=None):
        """Gradients of the loss whose logit-gradient is ``g_logits``.

        Returns ``(grad_input, stage_grads, head_grads)``; stages not marked
        trainable are skipped when their input gradient is not needed.
        """
        extras = extras or [None] * len(self.stages)
        trainable = [True] * len(self.stages) if trainable is None else trainable
        head = {"u": g_logits.T @ feats, "r": g_logits.sum(axis=0)}
        grad = (g_logits @ self.u).reshape((len(feats),) + self.stages[-1].out_shape)
        stage_grads = [None] * len(self.stages)
        lowest = 0 if need_input_grad else next((i for i, t in enumerate(trainable) if t), len(self.stages))
        for i in range(len(self.stages) - 1, lowest - 1, -1):
            grad, g = self.stages[i].backward(grad, caches[i], extras[i])
            if trainable[i]:
                stage_grads[i] = g
        return (grad if need_input_grad else None), stage_grads, head

    def copy(self):
        return Network.from_state(*self.state())

    # -- serialization ----------------------------------------------------------

    def state(self):
        meta = {
            "input_shape": list(self.input_shape),
            "n_classes": self.n_classes,
            "stages": [s.cfg.to_dict() for s in self.stages],
        }
        arrays = {"head.u": self.u, "head.r": self.r}
        for i, s in enumerate(self.stages):
            p = f"stage{i}."
            arrays[p + "table"] = s.table.entries
            arrays[p + "W"] = s.encoder.bank.weights
            if isinstance(s.encoder, SiEncoder):
                arrays[p + "S"] = s.encoder.S
                arrays[p + "b"] = s.encoder.shrink.b
                arrays[p + "beta"] = np.array([s.encoder.shrink.beta])
            else:
                arrays[p + "gain"] = s.encoder.gain
                arrays[p + "bias"] = s.encoder.bias
        return meta, arrays

    @classmethod
    def from_state(cls, meta, arrays):
        configs = [StageConfig(**{**d, "fan_out": tuple(d["fan_out"]) if d.get("fan_out") else None}) for d in meta["stages"]]
        shapes = shape_chain(meta["input_shape"], configs)
        stages = []
        for i, cfg in enumerate(configs):
            p = f"stage{i}."
            table = ConnectionTable(arrays[p + "table"].copy(), shapes[i][0], cfg.n_out)
            bank = KernelBank(arrays[p + "W"].copy(), table.mask())
            if cfg.encoder == "si":
                enc = SiEncoder(bank, arrays[p + "S"].copy(), ShrinkParams(arrays[p + "b"].copy(), float(arrays[p + "beta"][0])))
            else:
                enc = TanhEncoder(bank, arrays[p + "gain"].copy(), arrays[p + "bias"].copy())
            stages.append(Stage(cfg, shapes[i], table, enc))
        net = cls(meta["input_shape"], stages, meta["n_classes"])
        net.u = arrays["head.u"].copy()
        net.r = arrays["head.r"].copy()
        return net


def save_model(path, net, extra_meta=None):
    meta, arrays = net.state()
    meta.update(extra_meta or {})
    _binio.write_container(path, _MODEL_MAGIC, meta, arrays)


def load_model(path):
    """Returns ``(network, meta)``."""
    meta, arrays = _binio.read_container(path, _MODEL_MAGIC)
    return Network.from_state(meta, arrays), meta


# -- supervised training ----------------------------------------------------------


def _batches(X, size):
    for i in range(0, len(X), size):
        yield X[i : i + size]


def batched_features(net, X, upto=None, batch_size=64):
    out = [net.features(xb, upto) for xb in _batches(X, batch_size)]
    if upto is None:
        out = [o.reshape(len(o), -1) for o in out]
    return np.concatenate(out)


def _first_nonfinite(net, xb):
    h = xb
    for i, s in enumerate(net.stages):
        h, c = s.forward(h)
        for op, v in c["states"].items():
            if not np.all(np.isfinite(v)):
                return f"stage {i} {op}"
    return "head"


def supervised_loss(net, xb, yb, lambda_l1=0.0, penalty_site="post-pool", penalty_stages=None, l1=0.0, l2=0.0):
    """Mean cross-entropy (+ state L1 and head penalties) and all gradients.

    Returns ``(loss, g_logits, feats, caches, extras, penalty)``; ``penalty``
    is the mean L1 norm of the penalised states and ``extras`` holds their
    gradients for :meth:`Network.backward`.
    """
    feats, logits, caches = net.forward(xb)
    n = len(xb)
    ce = float(np.mean(logsumexp(logits, axis=1) - logits[np.arange(n), yb]))
    g = softmax(logits, axis=1)
    g[np.arange(n), yb] -= 1.0
    g /= n
    extras, penalty = _penalty_grads(net, caches, n, lambda_l1, penalty_site, penalty_stages)
    loss = ce + lambda_l1 * penalty + l1 * float(np.abs(net.u).sum()) + l2 * float(np.sum(net.u**2))
    return loss, g, feats, caches, extras, penalty


def _site_op(stage, site):
    if site == "post-encoder":
        return "enc"
    if site == "post-pool":
        return "pool"
    raise ConfigError(f"unknown penalty site {site!r}")


def _penalty_grads(net, caches, n, lambda_l1, site, which):
    which = range(len(net.stages)) if which is None else which
    extras = [None] * len(net.stages)
    penalty = 0.0
    for i in which:
        op = _site_op(net.stages[i], site)
        s = caches[i]["states"][op]
        # mean absolute activation per unit keeps lambda on the scale of the loss
        scale = n * s[0].size
        penalty += float(np.abs(s).sum()) / scale
        if lambda_l1:
            extras[i] = {op: lambda_l1 * np.sign(s) / scale}
    return extras, penalty


def supervised_step(net, xb, yb, lr, lambda_l1=0.0, penalty_site="post-pool", penalty_stages=None, l1=0.0, l2=0.0, trainable=None):
    """One SGD step on every trainable parameter. Returns ``(loss, penalty)``."""
    loss, g, feats, caches, extras, penalty = supervised_loss(net, xb, yb, lambda_l1, penalty_site, penalty_stages, l1, l2)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss; first non-finite layer: {_first_nonfinite(net, xb)}")
    _, stage_grads, head = net.backward(g, feats, caches, extras, trainable=trainable)
    if lr:
        head["u"] = head["u"] + l1 * np.sign(net.u) + 2.0 * l2 * net.u
        for name in ("u", "r"):
            if not np.all(np.isfinite(head[name])):
                raise NumericError(f"non-finite gradient for head.{name}")
        net.u -= lr * head["u"]
        net.r -= lr * head["r"]
        for s, sg in zip(net.stages, stage_grads):
            if sg is not None:
                s.encoder.apply_update(sg, lr)
    return loss, penalty


def _accuracy_loss(net, X, y, batch_size=64):
    losses, correct = [], 0
    for i in range(0, len(X), batch_size):
        xb, yb = X[i : i + batch_size], y[i : i + batch_size]
        _, logits, _ = net.forward(xb)
        losses.append(np.sum(logsumexp(logits, axis=1) - logits[np.arange(len(xb)), yb]))
        correct += int(np.sum(np.argmax(logits, axis=1) == yb))
    return float(np.sum(losses) / len(X)), correct / len(X)


# -- estimator ------------------------------------------------------------------


class SparseConvNet(ClassifierMixin, BaseEstimator):
    """Sparse convolutional feature hierarchy with a logistic head.

    ``fit`` runs the whole protocol: greedy stage-wise (D)PSD pretraining
    where requested, then either a convex fit of the head on frozen features
    or global supervised SGD (``+`` tokens), optionally with an L1 penalty on
    internal states.

    Parameters
    ----------
    arch : str or (input_shape, list of StageConfig)
    protocol : str
    lambda_l1 : float
        State sparsity weight for ``L1`` protocols.
    penalty_site : {"post-pool", "post-encoder"}
    penalty_stages : list of int or None (all stages)
    head_l1, head_l2 : float
        Head regularisation.
    lr, epochs, batch_size : supervised SGD settings.
    early_stopping, validation_fraction, n_iter_no_change
        Hold out part of the training set and keep the best epoch.
    n_patches : int
        Patches (or regions) sampled per stage for pretraining.
    conv_region : int
        Region side for convolutional pretraining.
    dpsd_params : dict
        Extra keyword arguments for :class:`DPSD` / :class:`ConvDPSD`.
    init_model : Network, optional
        Start from these stage filters and skip pretraining.
    """

    def __init__(
        self,
        arch="desk",
        protocol="RR",
        encoder="si",
        lambda_l1=0.4,
        penalty_site="post-pool",
        penalty_stages=None,
        head_l1=1e-5,
        head_l2=1e-2,
        lr=0.003,
        epochs=30,
        batch_size=1,
        early_stopping=True,
        validation_fraction=0.1,
        n_iter_no_change=5,
        n_patches=100000,
        conv_region=16,
        dpsd_params=None,
        init_model=None,
        random_state=None,
    ):
        self.arch = arch
        self.protocol = protocol
        self.encoder = encoder
        self.lambda_l1 = lambda_l1
        self.penalty_site = penalty_site
        self.penalty_stages = penalty_stages
        self.head_l1 = head_l1
        self.head_l2 = head_l2
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.early_stopping = early_stopping
        self.validation_fraction = validation_fraction
        self.n_iter_no_change = n_iter_no_change
        self.n_patches = n_patches
        self.conv_region = conv_region
        self.dpsd_params = dpsd_params
        self.init_model = init_model
        self.random_state = random_state

    def _arch(self):
        if isinstance(self.arch, str):
            return get_arch(self.arch, self.encoder)
        shape, stages = self.arch
        return tuple(shape), list(stages)

    def _check_X(self, X):
        X = check_tensor3(X, "X")
        if X.ndim == 3:
            X = X[None]
        return X

    # -- pretraining ------------------------------------------------------------

    def pretrain(self, X, y=None):
        """Build the network and run the pretraining phase only."""
        X = self._check_X(X)
        input_shape, configs = self._arch()
        if X.shape[1:] != tuple(input_shape):
            raise DimensionError(f"inputs are {X.shape[1:]}, architecture expects {tuple(input_shape)}")
        shape_chain(input_shape, configs)
        self.protocol_ = parse_protocol(self.protocol, len(configs))
        if y is not None:
            self.classes_, y_idx = np.unique(np.asarray(y), return_inverse=True)
        else:
            self.classes_, y_idx = np.array([0, 1]), None
        rng = np.random.default_rng(self.random_state)
        if self.init_model is not None:
            net = self.init_model.copy()
            if net.configs != configs and [c.to_dict() for c in net.configs] != [c.to_dict() for c in configs]:
                raise ConfigError("init_model architecture does not match arch")
            if net.n_classes != len(self.classes_):
                net.u = np.zeros((len(self.classes_), net.n_features))
                net.r = np.zeros(len(self.classes_))
                net.n_classes = len(self.classes_)
            self.model_ = net
            self.pretrained_ = []
            return self
        net = Network.random(input_shape, configs, len(self.classes_), rng)
        self.pretrained_ = []
        for i, (stage, proto) in enumerate(zip(net.stages, self.protocol_)):
            if proto.init == "R":
                continue
            if proto.init == "D" and y_idx is None:
                raise ConfigError("D protocols need labels")
            inputs = batched_features(net, X, upto=i)
            seed = int(rng.integers(2**31))
            est = self._pretrain_stage(stage, inputs, y_idx, proto, seed)
            self.pretrained_.append(est)
            logger.info("stage %d pretrained (%s): %s", i, type(est).__name__, est.history_[-1])
        self.model_ = net
        return self

    def _pretrain_stage(self, stage, inputs, y_idx, proto, seed):
        cfg = stage.cfg
        k = cfg.kernel_size
        rng = np.random.default_rng(seed)
        c, h, w = inputs.shape[1:]
        kw = dict(self.dpsd_params or {})
        kw.setdefault("n_iter", 1)
        kw.setdefault("scale_lr", True)
        disc = proto.init == "D"
        conn = stage.table.mask()
        side = min(self.conv_region, h, w) if proto.conv else k
        n = min(self.n_patches, len(inputs) * (h - side + 1) * (w - side + 1))
        idx = rng.integers(len(inputs), size=n)
        ii = rng.integers(h - side + 1, size=n)
        jj = rng.integers(w - side + 1, size=n)
        patches = np.stack([inputs[a, :, b : b + side, d : d + side] for a, b, d in zip(idx, ii, jj)])
        labels = y_idx[idx] if disc else None
        if proto.conv:
            est = ConvDPSD(n_components=cfg.n_out, kernel_size=k, encoder=cfg.encoder, discriminative=disc, mask=conn, random_state=seed, **kw)
            est.fit(patches, labels)
            stage.encoder = copy.deepcopy(est.encoder_)
        else:
            mask = np.repeat(conn, k * k, axis=1)
            est = DPSD(n_components=cfg.n_out, encoder=cfg.encoder, discriminative=disc, mask=mask, random_state=seed, **kw)
            est.fit(patches.reshape(n, -1), labels)
            stage.encoder = est.encoder_.to_conv(c, k, conn)
        return est

    # -- training -----------------------------------------------------------------

    def fit(self, X, y, eval_set=None):
        """Run the configured protocol. ``eval_set=(X_test, y_test)`` is logged each epoch."""
        X = self._check_X(X)
        y = np.asarray(y)
        self.pretrain(X, y)
        y_idx = np.searchsorted(self.classes_, y)
        net = self.model_
        rng = np.random.default_rng(None if self.random_state is None else self.random_state + 7919)
        self.metrics_ = []
        ev = None
        if eval_set is not None:
            ev = (self._check_X(eval_set[0]), np.searchsorted(self.classes_, np.asarray(eval_set[1])))

        finetune = any(p.finetune for p in self.protocol_)
        sparse = any(p.sparse for p in self.protocol_)
        order = rng.permutation(len(X))
        n_val = int(round(self.validation_fraction * len(X))) if finetune and self.early_stopping else 0
        val_idx, tr_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
        feats = batched_features(net, X[tr_idx])
        u, r, _ = classifier_train(feats, y_idx[tr_idx], self.head_l1, self.head_l2, len(self.classes_))
        net.u, net.r = u, r
        self._log(0, net, X[tr_idx], y_idx[tr_idx], ev)
        if not finetune:
            return self

        trainable = [p.finetune for p in self.protocol_]
        lam = self.lambda_l1 if sparse else 0.0
        best = (np.inf, net.copy(), 0)
        if n_val:
            vloss, vacc = _accuracy_loss(net, X[val_idx], y_idx[val_idx])
            self.metrics_.append({"epoch": 0, "split": "val", "loss": vloss, "accuracy": vacc})
            best = (vloss, net.copy(), 0)
        stall = 0
        for epoch in range(1, self.epochs + 1):
            perm = tr_idx[rng.permutation(len(tr_idx))]
            for start in range(0, len(perm), self.batch_size):
                b = perm[start : start + self.batch_size]
                supervised_step(net, X[b], y_idx[b], self.lr, lam, self.penalty_site, self.penalty_stages, self.head_l1, self.head_l2, trainable)
            self._log(epoch, net, X[tr_idx], y_idx[tr_idx], ev)
            if n_val:
                vloss, vacc = _accuracy_loss(net, X[val_idx], y_idx[val_idx])
                self.metrics_.append({"epoch": epoch, "split": "val", "loss": vloss, "accuracy": vacc})
                if vloss < best[0] - 1e-12:
                    best, stall = (vloss, net.copy(), epoch), 0
                else:
                    stall += 1
                    if stall >= self.n_iter_no_change:
                        break
        if n_val:
            self.model_ = best[1]
            self.best_epoch_ = best[2]
        return self

    def _log(self, epoch, net, X, y, ev):
        loss, acc = _accuracy_loss(net, X, y)
        self.metrics_.append({"epoch": epoch, "split": "train", "loss": loss, "accuracy": acc})
        if ev is not None:
            loss, acc = _accuracy_loss(net, *ev)
            self.metrics_.append({"epoch": epoch, "split": "test", "loss": loss, "accuracy": acc})

    # -- inference ------------------------------------------------------------------

    def transform(self, X):
        """Flat features from the last stage."""
        check_is_fitted(self, "model_")
        return batched_features(self.model_, self._check_X(X))

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return self.transform(X) @ self.model_.u.T + self.model_.r

    def predict_proba(self, X):
        return softmax(self.decision_function(X), axis=1)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def state_l1(self, X, site="post-pool", stages=None):
        """Mean (per image) L1 norm of the penalised internal states."""
        check_is_fitted(self, "model_")
        X = self._check_X(X)
        total = 0.0
        for xb in _batches(X, 64):
            _, _, caches = self.model_.forward(xb)
            _, p = _penalty_grads(self.model_, caches, 1, 0.0, site, stages)
            total += p
        return total / len(X)

    # -- persistence ----------------------------------------------------------------

    def save(self, path):
        check_is_fitted(self, "model_")
        meta = {"protocol": self.protocol, "classes": np.asarray(self.classes_).tolist(), "random_state": self.random_state}
        save_model(path, self.model_, meta)

    def write_metrics(self, path):
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["epoch", "split", "loss", "accuracy"], lineterminator="\n")
            w.writeheader()
            for row in self.metrics_:
                w.writerow({**row, "loss": repr(row["loss"]), "accuracy": repr(row["accuracy"])})


def run_protocol(X, y, arch="desk", protocol="RR", eval_set=None, **params):
    """Fit a :class:`SparseConvNet` and return ``(estimator, metrics)``."""
    est = SparseConvNet(arch=arch, protocol=protocol, **params).fit(X, y, eval_set=eval_set)
    return est, est.metrics_
