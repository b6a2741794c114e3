"""Independent reference computations used as test oracles."""

import numpy as np
from mpmath import mp, mpf
from scipy.optimize import minimize_scalar


def central_diff(f, x, h=1e-6):
    """Central-difference gradient of scalar ``f`` at every entry of ``x`` (modified in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        v = x[i]
        x[i] = v + h
        fp = f()
        x[i] = v - h
        fm = f()
        x[i] = v
        g[i] = (fp - fm) / (2 * h)
    return g


def sampled_diff(f, x, idx_list, h=1e-6):
    """Central differences at selected indices only."""
    out = []
    for i in idx_list:
        v = x[i]
        x[i] = v + h
        fp = f()
        x[i] = v - h
        fm = f()
        x[i] = v
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))


def lasso_cd(x, D, lam, n_sweeps=5000, tol=1e-15):
    """Cyclic coordinate descent on ``||x - D z||^2 + lam ||z||_1`` (exact 1-D minimisers)."""
    n = D.shape[1]
    z = np.zeros(n)
    col2 = np.sum(D * D, axis=0)
    r = x.copy()
    for _ in range(n_sweeps):
        delta = 0.0
        for k in range(n):
            if col2[k] == 0:
                continue
            old = z[k]
            rho = D[:, k] @ r + col2[k] * old
            new = np.sign(rho) * max(abs(rho) - lam / 2.0, 0.0) / col2[k]
            if new != old:
                r -= D[:, k] * (new - old)
                z[k] = new
                delta = max(delta, abs(new - old))
        if delta < tol:
            break
    return z


def lasso_objective(x, D, z, lam):
    e = x - D @ z
    return float(e @ e + lam * np.abs(z).sum())


def coordinate_minimise(f, z, n_sweeps=200, bound=10.0):
    """Generic coordinate descent using bounded 1-D minimisation (nonsmooth objectives)."""
    z = z.copy()
    for _ in range(n_sweeps):
        before = f(z)
        for k in range(len(z)):

            def fk(v, k=k):
                w = z.copy()
                w[k] = v
                return f(w)

            cands = [minimize_scalar(fk, bounds=(-bound, 0.0), method="bounded", options={"xatol": 1e-12}).x,
                     minimize_scalar(fk, bounds=(0.0, bound), method="bounded", options={"xatol": 1e-12}).x, 0.0, z[k]]
            z[k] = min(cands, key=fk)
        if before - f(z) < 1e-14:
            break
    return z


def soft_shrink_mp(x, b, beta, dps=50):
    """High-precision evaluation of sgn(x) ((1/beta) log(e^{beta b} + e^{beta |x|} - 1) - b)."""
    mp.dps = dps
    x, b, beta = mpf(x), mpf(b), mpf(beta)
    s = 1 if x > 0 else (-1 if x < 0 else 0)
    return float(s * (mp.log(mp.e ** (beta * b) + mp.e ** (beta * abs(x)) - 1) / beta - b))


def logistic_mp(scores, y, dps=50):
    mp.dps = dps
    s = [mpf(v) for v in scores]
    return float(mp.log(sum(mp.e ** v for v in s)) - s[y])


def correlate_loops(x, w):
    """Direct loop cross-correlation: x (c, h, w), w (p, c, k, k)."""
    c, h, wd = x.shape
    p, _, k, _ = w.shape
    out = np.zeros((p, h - k + 1, wd - k + 1))
    for o in range(p):
        for i in range(h - k + 1):
            for j in range(wd - k + 1):
                out[o, i, j] = np.sum(x[:, i : i + k, j : j + k] * w[o])
    return out
