"""Modified FISTA solver for non-negative composite objectives.

Minimizes ``f(x) + sum_i w_i * |x_i|`` subject to ``x >= 0``, where ``f`` is
smooth and convex. Compared to textbook FISTA, the momentum carried by each
dimension is reset to zero whenever that dimension hits the non-negativity
boundary or its gradient changes sign, which lets the momentum factor stay
fixed at 1 instead of following the usual decaying schedule.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Tuple

import numpy as np
from numpy.typing import NDArray

Vector = NDArray[np.float64]

DEFAULT_MAX_ITER = 2000
DEFAULT_TOL = 1e-6
# number of consecutive iterations the relative cost change must stay below
# tol; a single quiet step can be a momentum artifact
STALL_WINDOW = 3


@dataclass
class Objective:
    """Composite objective: smooth part plus weighted l1 penalty.

    ``eval_grad`` maps an iterate to ``(cost, gradient)`` of the *smooth*
    part only; the l1 term is handled by the solver through ``l1_weights``
    (entries may be zero to leave dimensions unpenalized).
    """

    eval_grad: Callable[[Vector], Tuple[float, Vector]]
    dim: int
    l1_weights: Vector

    def __post_init__(self) -> None:
        if self.dim <= 0:
            raise ValueError("objective dimension must be positive")
        self.l1_weights = np.asarray(self.l1_weights, dtype=np.float64)
        if self.l1_weights.shape != (self.dim,):
            raise ValueError("l1_weights length must equal dim")
        if np.any(self.l1_weights < 0):
            raise ValueError("l1_weights must be non-negative")

    def composite(self, x: Vector) -> Tuple[float, Vector]:
        """Cost and (sub)gradient of the full objective at ``x``.

        The reported l1 subgradient uses ``sign(x)`` with ``sign(0) = 0``.
        The solver itself steps along the one-sided derivative instead (see
        :func:`step`), since iterates never leave the non-negative orthant.
        """
        cost, grad = self.eval_grad(x)
        cost = float(cost) + float(self.l1_weights @ np.abs(x))
        grad = np.asarray(grad, dtype=np.float64) + self.l1_weights * np.sign(x)
        return cost, grad


class StopReason(Enum):
    TOLERANCE = "tolerance"
    MAX_ITER = "max_iter"


@dataclass
class SolveReport:
    iterations: int
    final_cost: float
    converged: bool
    stop_reason: StopReason


@dataclass
class OptimizerState:
    """Mutable per-solve state.

    ``L`` may be a positive scalar or a per-dimension vector of smoothness
    bounds; steps divide by it elementwise either way.
    """

    x: Vector
    diff: Vector
    gradient_last: Vector
    t: float
    L: float | Vector
    last_cost: float = field(default=np.nan)
    last_eval_x: Vector | None = field(default=None, repr=False)

    @classmethod
    def initial(cls, x0: Vector, L: float | Vector) -> "OptimizerState":
        x0 = np.asarray(x0, dtype=np.float64).copy()
        if np.any(x0 < 0):
            raise ValueError("initial iterate must be non-negative")
        if np.any(np.asarray(L) <= 0):
            raise ValueError("L must be positive")
        zeros = np.zeros_like(x0)
        return cls(x=x0, diff=zeros.copy(), gradient_last=zeros.copy(), t=1.0, L=L)


class DenseColumns:
    """Column accessor over an explicit operator matrix (test scale)."""

    def __init__(self, operator: NDArray) -> None:
        self._a = np.asarray(operator, dtype=np.float64)
        if self._a.ndim != 2:
            raise ValueError("operator must be 2-D")

    @property
    def dim(self) -> int:
        return self._a.shape[1]

    def column_sqnorms(self) -> Vector:
        return np.einsum("ij,ij->j", self._a, self._a)

    def abs_cross_sums(self) -> Vector:
        gram = np.abs(self._a.T @ self._a)
        return gram.sum(axis=1) - np.diag(gram)


def lipschitz_bounds(columns) -> Vector:
    """Per-dimension smoothness bounds for ``f = ||y - A x||^2``.

    Returns ``2 * (||a_i||^2 + sum_{j != i} |<a_i, a_j>|)`` for each column,
    i.e. twice the Gershgorin row sums of the Gram matrix, which dominate
    its spectrum axis by axis.
    """
    sq = np.asarray(columns.column_sqnorms(), dtype=np.float64)
    cross = np.asarray(columns.abs_cross_sums(), dtype=np.float64)
    return 2.0 * (sq + cross)


def estimate_lipschitz(objective: Objective, columns) -> float:
    """Scalar Lipschitz bound for a least-squares composite objective."""
    bounds = lipschitz_bounds(columns)
    if bounds.shape != (objective.dim,):
        raise ValueError("column accessor dimension does not match objective")
    L = float(bounds.max(initial=0.0))
    if L <= 0.0:
        raise ValueError("degenerate operator")
    return L


def step(state: OptimizerState, objective: Objective, eta_schedule: bool = False) -> OptimizerState:
    """Advance the iterate by one momentum-descent step (in place).

    Order of operations: momentum move, boundary clamp, composite gradient
    step, boundary clamp, per-dimension momentum update with sign-change
    reset. The composite cost evaluated at the post-momentum point is stored
    on ``state.last_cost`` for stopping checks.
    """
    x, diff = state.x, state.diff

    if eta_schedule:
        t_next = (1.0 + np.sqrt(1.0 + 4.0 * state.t * state.t)) / 2.0
        eta = (state.t - 1.0) / t_next
        state.t = t_next
    else:
        eta = 1.0

    x += eta * diff
    clamped = x < 0.0
    if clamped.any():
        x[clamped] = 0.0
        diff[clamped] = 0.0

    cost, grad = objective.eval_grad(x)
    # On the feasible set the penalty is linear (|x_i| = x_i), so its step
    # contribution is the constant weight vector even at x_i = 0. Taking the
    # two-sided sign(0) = 0 subgradient there instead turns boundary optima
    # into small limit cycles rather than fixed points.
    cost = float(cost) + float(objective.l1_weights @ x)
    grad = np.asarray(grad, dtype=np.float64) + objective.l1_weights
    if not np.all(np.isfinite(grad)) or not np.isfinite(cost):
        raise RuntimeError("divergence detected")
    state.last_cost = cost
    state.last_eval_x = x.copy()

    x -= grad / state.L
    clamped = x < 0.0
    x[clamped] = 0.0
    diff[clamped] = 0.0
    grad[clamped] = 0.0

    free = ~clamped
    flipped = free & (grad * state.gradient_last < 0.0)
    diff[flipped] = 0.0
    keep = free & ~flipped
    diff[keep] -= grad[keep] / (state.L[keep] if np.ndim(state.L) else state.L)

    state.gradient_last = grad
    return state


def solve(
    objective: Objective,
    x0: Vector,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
    eta_schedule: bool = False,
    L: float | Vector | None = None,
    columns=None,
) -> Tuple[Vector, SolveReport]:
    """Run the solver from ``x0 >= 0`` until the cost stalls or max_iter.

    ``L`` may be given directly; otherwise it is estimated from ``columns``
    (a column accessor, see :func:`estimate_lipschitz`). Returns the best
    feasible iterate encountered, which is robust to the small limit cycles
    the boundary subgradient convention can sustain near an optimum.
    """
    if L is None:
        if columns is None:
            raise ValueError("either L or a column accessor is required")
        L = estimate_lipschitz(objective, columns)
    state = OptimizerState.initial(x0, L)

    best_cost, _ = objective.composite(state.x)
    best_x = state.x.copy()
    prev_cost = best_cost
    quiet = 0
    iterations = 0
    converged = False

    for iterations in range(1, max_iter + 1):
        step(state, objective, eta_schedule=eta_schedule)
        cost = state.last_cost
        if cost < best_cost:
            best_cost = cost
            best_x = state.last_eval_x
        denom = max(abs(prev_cost), 1e-300)
        quiet = quiet + 1 if abs(cost - prev_cost) / denom < tol else 0
        prev_cost = cost
        if quiet >= STALL_WINDOW:
            converged = True
            break

    # the post-step endpoint is never evaluated inside the loop
    final_cost, _ = objective.composite(state.x)
    if final_cost < best_cost:
        best_cost = final_cost
        best_x = state.x.copy()

    report = SolveReport(
        iterations=iterations,
        final_cost=float(best_cost),
        converged=converged,
        stop_reason=StopReason.TOLERANCE if converged else StopReason.MAX_ITER,
    )
    return best_x, report
