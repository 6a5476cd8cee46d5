# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Fused solver loop over sparse columns (CSC arrays).

Implements the same iteration as ``streamdemix.optimizer.solve`` for the
least-squares l1 case: momentum move, clamp, two-pass composite gradient
step, clamp, per-dimension momentum reset, stall detection over a window of
three quiet iterations, best-iterate tracking. Pass 1 skips columns whose
coefficient is zero; pass 2 touches every stored entry once.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport isfinite

cnp.import_array()

from ..optimizer import SolveReport, StopReason

DEF STALL_WINDOW = 3


cdef double _eval_cost(
    const double[::1] data, const int[::1] indices, const int[::1] indptr,
    const double[::1] y, const double[::1] l1, const double[::1] x,
    double[::1] v, Py_ssize_t n_pix, Py_ssize_t dim,
) noexcept nogil:
    """Residual pass plus cost; fills ``v`` with y - chi @ x."""
    cdef Py_ssize_t j, m, p
    cdef double cost = 0.0, xm
    for j in range(n_pix):
        v[j] = y[j]
    for m in range(dim):
        xm = x[m]
        if xm != 0.0:
            for p in range(indptr[m], indptr[m + 1]):
                v[indices[p]] -= data[p] * xm
    for j in range(n_pix):
        cost += v[j] * v[j]
    for m in range(dim):
        cost += l1[m] * x[m]
    return cost


def solve_nonneg_lasso(chi, y, l1, double L, x0, int max_iter, double tol):
    """Least-squares l1 solve over sparse columns; mirrors the fallback."""
    cdef const double[::1] data = np.ascontiguousarray(chi.data, dtype=np.float64)
    cdef const int[::1] indices = np.ascontiguousarray(chi.indices, dtype=np.int32)
    cdef const int[::1] indptr = np.ascontiguousarray(chi.indptr, dtype=np.int32)
    cdef const double[::1] y_v = np.ascontiguousarray(y, dtype=np.float64)
    cdef const double[::1] l1_v = np.ascontiguousarray(l1, dtype=np.float64)

    cdef Py_ssize_t n_pix = chi.shape[0]
    cdef Py_ssize_t dim = chi.shape[1]
    if L <= 0.0:
        raise ValueError("L must be positive")

    x_arr = np.array(x0, dtype=np.float64, copy=True).ravel()
    if x_arr.shape[0] != dim:
        raise ValueError("x0 length does not match operator")
    if np.any(x_arr < 0):
        raise ValueError("initial iterate must be non-negative")

    cdef double[::1] x = x_arr
    cdef double[::1] diff = np.zeros(dim)
    cdef double[::1] grad_last = np.zeros(dim)
    cdef double[::1] v = np.zeros(n_pix)
    best_arr = x_arr.copy()
    cdef double[::1] best_x = best_arr

    cdef double best_cost, prev_cost, cost, g, xm, rel, denom
    cdef Py_ssize_t m, p, j
    cdef int iterations = 0, quiet = 0
    cdef bint converged = False, diverged = False

    with nogil:
        best_cost = _eval_cost(data, indices, indptr, y_v, l1_v, x, v, n_pix, dim)
        prev_cost = best_cost
        if not isfinite(best_cost):
            diverged = True
        while not diverged and iterations < max_iter and not converged:
            iterations += 1

            for m in range(dim):
                x[m] += diff[m]
                if x[m] < 0.0:
                    x[m] = 0.0
                    diff[m] = 0.0

            cost = _eval_cost(data, indices, indptr, y_v, l1_v, x, v, n_pix, dim)
            if not isfinite(cost):
                diverged = True
                break
            if cost < best_cost:
                best_cost = cost
                for m in range(dim):
                    best_x[m] = x[m]

            for m in range(dim):
                g = l1_v[m]
                for p in range(indptr[m], indptr[m + 1]):
                    g -= 2.0 * data[p] * v[indices[p]]
                xm = x[m] - g / L
                if xm < 0.0:
                    x[m] = 0.0
                    diff[m] = 0.0
                    g = 0.0
                else:
                    x[m] = xm
                    if g * grad_last[m] < 0.0:
                        diff[m] = 0.0
                    else:
                        diff[m] -= g / L
                grad_last[m] = g

            denom = prev_cost if prev_cost >= 0.0 else -prev_cost
            if denom < 1e-300:
                denom = 1e-300
            rel = cost - prev_cost
            if rel < 0.0:
                rel = -rel
            quiet = quiet + 1 if rel / denom < tol else 0
            prev_cost = cost
            if quiet >= STALL_WINDOW:
                converged = True

        if not diverged:
            cost = _eval_cost(data, indices, indptr, y_v, l1_v, x, v, n_pix, dim)
            if isfinite(cost) and cost < best_cost:
                best_cost = cost
                for m in range(dim):
                    best_x[m] = x[m]

    if diverged:
        raise RuntimeError("divergence detected")

    report = SolveReport(
        iterations=int(iterations),
        final_cost=float(best_cost),
        converged=bool(converged),
        stop_reason=StopReason.TOLERANCE if converged else StopReason.MAX_ITER,
    )
    return best_arr, report
