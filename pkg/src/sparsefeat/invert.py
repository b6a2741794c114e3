"""Recover an input whose feature maps match a recorded target.

``hallucinate`` minimises ``||F(x) - target||^2`` over the input ``x`` of a
frozen :class:`~sparsefeat.network.Network` by steepest descent with Armijo
backtracking, so the loss trace never increases.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, DimensionError, NumericError
from .network import Network, PoolSpec, StageConfig, inversion_arch, shape_chain

logger = logging.getLogger(__name__)

_SITES = ("output", "pre-pool")


def build_inversion_arch(cn=True, encoder="si"):
    """``(input_shape, stage configs)`` for the inversion network."""
    return inversion_arch(cn=cn, encoder=encoder)


def small_inversion_arch(cn=True, encoder="si"):
    """Scaled-down inversion network on 1x47x47 (64x18x18, then 128x6x6).

    Same map counts, fan-in and pooling as the full network; the smaller
    input and 5x5 second-stage kernels keep it fast.
    """
    norm = "before-pool" if cn else "none"
    stages = [
        StageConfig(encoder, 64, 9, norm=norm, pool=PoolSpec("avg", 5, 2)),
        StageConfig(encoder, 128, 5, fan_in=32, norm=norm, pool=PoolSpec("avg", 4, 2), norm_window=5),
    ]
    shape_chain((1, 47, 47), stages)
    return (1, 47, 47), stages


def toy_inversion_arch(cn=True, encoder="si"):
    """Two-stage 1x20x20 toy pair: 16x8x8, then 32x3x3."""
    norm = "before-pool" if cn else "none"
    stages = [
        StageConfig(encoder, 16, 5, norm=norm, pool=PoolSpec("avg", 2, 2), norm_window=5),
        StageConfig(encoder, 32, 3, fan_in=8, norm=norm, pool=PoolSpec("avg", 2, 2), norm_window=3),
    ]
    shape_chain((1, 20, 20), stages)
    return (1, 20, 20), stages


def without_norm(net):
    """Copy of ``net`` with every N module removed and the same filters."""
    meta, arrays = net.state()
    for d in meta["stages"]:
        d["norm"] = "none"
    return Network.from_state(meta, arrays)


def _pre_pool_op(stage):
    ops = stage.ops()
    return ops[ops.index("pool") - 1]


def record_target(net, x, site="output"):
    """Feature maps of ``x`` at ``site`` (``"output"`` or ``"pre-pool"`` of the last stage)."""
    if site not in _SITES:
        raise ConfigError(f"site must be one of {_SITES}")
    xb = np.asarray(x, dtype=np.float64)[None]
    h = xb
    for s in net.stages:
        h, cache = s.forward(h)
    if site == "pre-pool":
        h = cache["states"][_pre_pool_op(net.stages[-1])]
    return h[0]


def inversion_loss(net, x, target, site="output", need_grad=True):
    """``(loss, grad wrt x)`` for a single image ``x``."""
    xb = np.asarray(x, dtype=np.float64)[None]
    caches = []
    h = xb
    for s in net.stages:
        h, c = s.forward(h)
        caches.append(c)
    last = net.stages[-1]
    if site == "pre-pool":
        h = caches[-1]["states"][_pre_pool_op(last)]
    r = h[0] - target
    loss = float(np.sum(r * r))
    if not need_grad:
        return loss, None
    g = 2.0 * r[None]
    if site == "pre-pool":
        zero = np.zeros((1,) + last.out_shape)
        g, _ = last.backward(zero, caches[-1], {_pre_pool_op(last): g})
    else:
        g, _ = last.backward(g, caches[-1])
    for s, c in zip(reversed(net.stages[:-1]), reversed(caches[:-1])):
        g, _ = s.backward(g, c)
    return loss, g[0]


@dataclass
class InversionTask:
    model: Network
    target: np.ndarray
    init: object = "random"
    steps: int = 200
    step_size: float = 1.0
    site: str = "output"
    random_state: object = None
    armijo: float = 1e-4
    tol: float = 1e-12

    def __post_init__(self):
        if self.site not in _SITES:
            raise ConfigError(f"site must be one of {_SITES}")
        self.target = np.asarray(self.target, dtype=np.float64)
        if not np.all(np.isfinite(self.target)):
            raise NumericError("target contains non-finite values")
        expected = record_target(self.model, np.zeros(self.model.input_shape), self.site).shape
        if self.target.shape != expected:
            raise DimensionError(f"target shape {self.target.shape} does not match model output {expected}")


def hallucinate(task, *args, **kwargs):
    """Run an :class:`InversionTask`; keyword arguments build one from a model.

    ``hallucinate(model, target, init=..., steps=...)`` is also accepted.
    Returns ``(image, trace)`` where ``trace[i]`` is the loss after step
    ``i`` (``trace[0]`` at the initial image).
    """
    if not isinstance(task, InversionTask):
        task = InversionTask(task, *args, **kwargs)
    net = task.model
    rng = np.random.default_rng(task.random_state)
    shape = net.input_shape

    def draw():
        return rng.normal(0.0, 0.1, size=shape)

    if isinstance(task.init, str):
        if task.init != "random":
            raise ConfigError("init must be 'random' or an image array")
        x = draw()
    else:
        x = np.array(task.init, dtype=np.float64)
        if x.shape != shape:
            raise DimensionError(f"init shape {x.shape} does not match model input {shape}")

    loss, g = inversion_loss(net, x, task.target, task.site)
    if loss > 0 and not np.any(g):
        logger.warning("zero gradient at the initial image; re-seeding once")
        x = draw()
        loss, g = inversion_loss(net, x, task.target, task.site)
        if loss > 0 and not np.any(g):
            logger.warning("zero gradient after re-seeding; returning the initial image")
            return x, [loss]

    trace = [loss]
    t = task.step_size
    for _ in range(task.steps):
        gg = float(np.sum(g * g))
        if loss <= task.tol or gg == 0.0:
            break
        while True:
            cand = x - t * g
            new, _ = inversion_loss(net, cand, task.target, task.site, need_grad=False)
            if new <= loss - task.armijo * t * gg:
                break
            t *= 0.5
            if t < 1e-20:
                break
        if t < 1e-20 or not new < loss:
            break
        step = cand - x
        x, loss = cand, new
        trace.append(loss)
        g_old = g
        _, g = inversion_loss(net, x, task.target, task.site)
        # Barzilai-Borwein trial step for the next line search
        yk = g - g_old
        sy = float(np.sum(step * yk))
        t = float(np.sum(step * step)) / sy if sy > 0 else 2.0 * t
    return x, trace


def normalized_mse(a, b):
    """MSE between two images after standardising each to zero mean, unit std.

    Rectified features cannot tell ``x`` from ``-x``, so the smaller of the
    errors against ``b`` and ``-b`` is returned.
    """

    def z(v):
        v = np.asarray(v, dtype=np.float64)
        s = v.std()
        return (v - v.mean()) / (s if s > 0 else 1.0)

    za, zb = z(a), z(b)
    return float(min(np.mean((za - zb) ** 2), np.mean((za + zb) ** 2)))
