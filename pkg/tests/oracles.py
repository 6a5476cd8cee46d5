"""Independent reference implementations used to pin expected values.

Everything here is deliberately naive: coordinate descent, power iteration,
finite differences and dense-matrix algebra. None of it shares code with the
package under test.
"""

import numpy as np


def cd_nonneg_lasso(A, y, l1, max_sweeps=20000, tol=1e-12):
    """Coordinate-descent solution of min_{x>=0} ||y - Ax||^2 + sum(l1 * x).

    ``l1`` may be a scalar or per-dimension vector. Sweeps until the largest
    coordinate update falls below ``tol`` times the solution scale.
    """
    A = np.asarray(A, dtype=float)
    y = np.asarray(y, dtype=float)
    m, d = A.shape
    l1 = np.broadcast_to(np.asarray(l1, dtype=float), (d,))
    sq = np.einsum("ij,ij->j", A, A)
    x = np.zeros(d)
    r = y.copy()
    for _ in range(max_sweeps):
        biggest = 0.0
        for i in range(d):
            if sq[i] == 0.0:
                continue
            old = x[i]
            rho = A[:, i] @ r + sq[i] * old
            new = max(0.0, (rho - l1[i] / 2.0) / sq[i])
            if new != old:
                r += A[:, i] * (old - new)
                x[i] = new
                biggest = max(biggest, abs(new - old))
        if biggest <= tol * max(1.0, np.abs(x).max()):
            break
    return x


def lasso_cost(A, y, l1, x):
    r = y - A @ x
    l1 = np.broadcast_to(np.asarray(l1, dtype=float), (A.shape[1],))
    return float(r @ r + l1 @ np.abs(x))


def power_iteration_lmax(G, iters=500, seed=0):
    """Largest eigenvalue of a symmetric PSD matrix by power iteration."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(G.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = G @ v
        lam = float(v @ w)
        n = np.linalg.norm(w)
        if n == 0.0:
            return 0.0
        v = w / n
    return lam


def central_diff_grad(f, x, h=1e-6):
    """Central finite-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g
