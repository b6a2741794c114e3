"""Proximal-gradient solvers for ``min_z H(z) + lambda_l1 * ||z||_1``.

``H`` is either the reconstruction energy ``||x - D z||^2`` or the
discriminative energy ``C(y, u z + r) + lambda1 * ||x - D z||^2`` where ``C``
is the multinomial logistic loss. ``D`` may be a dense matrix or any object
supporting ``D @ z`` and ``D.T @ r`` (e.g. a scipy ``LinearOperator``).
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax

from .exceptions import DimensionError, LabelError, NumericError, ParameterError


def logistic_loss(scores, y):
    """Cross-entropy of ``scores`` (c,) for label ``y`` and its gradient."""
    scores = np.asarray(scores, dtype=np.float64)
    c = scores.shape[-1]
    if c < 2:
        raise ParameterError("logistic loss needs at least two classes")
    if not 0 <= y < c:
        raise LabelError(f"label {y} outside [0, {c})")
    d = scores - scores[y]
    others = np.delete(d, y)
    if others.max() <= 0.0:
        # true class on top: log1p keeps full relative precision for tiny losses
        loss = float(np.log1p(np.sum(np.exp(others))))
    else:
        loss = float(logsumexp(d))
    grad = np.exp(d - logsumexp(d))
    grad[y] -= 1.0
    return loss, grad


def soft_threshold(v, t):
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def power_iteration(D, n, n_iter=20, rng=0):
    """Largest eigenvalue of ``D^T D`` by power iteration."""
    v = np.random.default_rng(rng).standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(n_iter):
        w = D.T @ (D @ v)
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            return 0.0
        v = w / lam
    return lam


@dataclass
class SmoothTerm:
    """Smooth part ``H`` of the sparse coding energy.

    Recon kind when ``y`` is None, discriminative kind otherwise; ``u`` (c, n)
    and ``r`` (c,) are the linear classifier parameters.
    """

    x: np.ndarray
    D: object
    y: int = None
    u: np.ndarray = None
    r: np.ndarray = None
    lambda1: float = 1.0
    _lipschitz: float = field(default=None, repr=False)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.D.shape[0] != self.x.shape[0]:
            raise DimensionError(f"dictionary has {self.D.shape[0]} rows, input has {self.x.shape[0]}")
        if self.y is not None:
            if self.u is None or self.r is None:
                raise ParameterError("discriminative term needs classifier parameters u and r")
            if self.u.shape[1] != self.n_components:
                raise DimensionError("classifier width does not match code size")
            if not 0 <= self.y < self.u.shape[0]:
                raise LabelError(f"label {self.y} outside [0, {self.u.shape[0]})")

    @property
    def kind(self):
        return "recon" if self.y is None else "discriminative"

    @property
    def n_components(self):
        return self.D.shape[1]

    def _recon_weight(self):
        return 1.0 if self.y is None else self.lambda1

    def value(self, z):
        e = self.x - self.D @ z
        val = self._recon_weight() * float(e @ e)
        if self.y is not None:
            s = self.u @ z + self.r
            val += float(logsumexp(s) - s[self.y])
        return val

    def grad(self, z):
        w = self._recon_weight()
        g = 2.0 * w * (self.D.T @ (self.D @ z - self.x)) if w else np.zeros(self.n_components)
        if self.y is not None:
            p = softmax(self.u @ z + self.r)
            p[self.y] -= 1.0
            g = g + self.u.T @ p
        return g

    def lipschitz(self, n_iter=20, safety=1.05):
        """Upper bound on the gradient's Lipschitz constant.

        The softmax Hessian has spectral norm at most 1/2, hence ``||u||^2/2``.
        """
        if self._lipschitz is None:
            L = 2.0 * self._recon_weight() * power_iteration(self.D, self.n_components, n_iter)
            if self.y is not None:
                L += np.linalg.norm(self.u, 2) ** 2 / 2.0
            self._lipschitz = max(L * safety, 1e-12)
        return self._lipschitz


def smooth_grad(term, z):
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (term.n_components,):
        raise DimensionError(f"code has shape {z.shape}, expected ({term.n_components},)")
    return term.grad(z)


@dataclass
class SolveResult:
    z: np.ndarray
    trace: list
    n_iter: int
    converged: bool

    @property
    def objective(self):
        return self.trace[-1]


def _l1(z, lam):
    return float(np.sum(lam * np.abs(z)))


def fista_solve(term, lambda_l1=0.5, max_iter=200, tol=1e-6, z0=None, lipschitz=None, accelerated=True, ridge=0.0):
    """Monotone FISTA (or ISTA with ``accelerated=False``).

    Minimises ``H(z) + sum(lambda_l1 * |z|) + sum(ridge * z**2)``; both
    weights may be scalars or per-coordinate arrays. The ridge part is handled
    in the proximal step, so it does not enter the Lipschitz constant.

    A momentum step that would raise the objective is rejected and the
    momentum reset, so ``trace`` (objective after each iteration) never
    increases. Momentum is also reset whenever it opposes the last
    proximal-gradient step. Stops when an accepted step changes the
    objective by less than ``tol`` relative; otherwise returns the best
    iterate with ``converged=False``.
    """
    lam = np.asarray(lambda_l1, dtype=np.float64)
    if np.any(lam < 0):
        raise ParameterError("lambda_l1 must be >= 0")
    if not tol > 0:
        raise ParameterError("tol must be > 0")
    rho = np.asarray(ridge, dtype=np.float64)
    if np.any(rho < 0):
        raise ParameterError("ridge must be >= 0")
    n = term.n_components
    z = np.zeros(n) if z0 is None else np.array(z0, dtype=np.float64).reshape(n)
    L = term.lipschitz() if lipschitz is None else float(lipschitz)

    def objective(v):
        f = term.value(v) + _l1(v, lam) + float(np.sum(rho * v * v))
        if not np.isfinite(f):
            raise NumericError("non-finite objective in sparse coding solve")
        return f

    f = objective(z)
    yk, t = z, 1.0
    trace = []
    converged = False
    for it in range(1, max_iter + 1):
        cand = soft_threshold(yk - term.grad(yk) / L, lam / L) / (1.0 + 2.0 * rho / L)
        fc = objective(cand)
        if fc > f:
            if accelerated and t > 1.0:
                # restart from the last accepted point without momentum
                yk, t = z, 1.0
                trace.append(f)
                continue
            trace.append(f)
            converged = True
            break
        change = f - fc
        if accelerated and np.dot(yk - cand, cand - z) <= 0.0:
            t_next = (1.0 + np.sqrt(1.0 + 4.0 * t * t)) / 2.0
            yk = cand + ((t - 1.0) / t_next) * (cand - z)
            t = t_next
        else:
            # momentum points uphill (gradient restart) or plain ISTA
            yk, t = cand, 1.0
        z, f = cand, fc
        trace.append(f)
        if change <= tol * max(abs(f), 1e-300):
            converged = True
            break
    return SolveResult(z, trace, len(trace), converged)


def ista_solve(term, lambda_l1=0.5, max_iter=200, tol=1e-6, z0=None, lipschitz=None, ridge=0.0):
    return fista_solve(term, lambda_l1, max_iter, tol, z0, lipschitz, accelerated=False, ridge=ridge)
