"""Pure-Python solver backend on scipy sparse matrix products."""

import numpy as np

from ..optimizer import Objective, solve


def solve_nonneg_lasso(chi, y, l1, L, x0, max_iter, tol):
    """Least-squares l1 solve over sparse columns; mirrors the extension."""
    y = np.asarray(y, dtype=np.float64)
    chi_t = chi.T.tocsr()

    def eval_grad(x):
        v = y - chi @ x
        return float(v @ v), -2.0 * (chi_t @ v)

    objective = Objective(eval_grad=eval_grad, dim=chi.shape[1], l1_weights=np.asarray(l1, dtype=np.float64))
    return solve(objective, x0, max_iter=max_iter, tol=tol, L=L)
