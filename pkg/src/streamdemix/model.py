"""Per-frame demixing model: known profiles plus an implicit bump dictionary.

A frame ``y`` is explained as ``X @ phi + W @ c`` where ``X`` holds the known
cell profiles and ``W`` is a lattice of truncated Gaussian bumps that absorbs
fluorescence the profiles cannot account for. ``W`` is never materialized as
a dense matrix; each column has support limited to a disk of the configured
radius.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Tuple

import numpy as np
from numpy.typing import NDArray
from scipy import sparse

from . import _kernels
from .optimizer import SolveReport, StopReason

Vector = NDArray[np.float64]

DEFAULT_LAMBDA = 0.15


@dataclass(frozen=True)
class FrameGeometry:
    """Pixel dimensions of a frame; pixels index as row * width + col."""

    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError("frame dimensions must be at least 1 pixel")

    @property
    def n_pixels(self) -> int:
        return self.width * self.height


@dataclass
class KernelGrid:
    """Regular lattice of bump centers covering a frame."""

    radius: int
    stride: int
    centers: NDArray[np.int64]  # (K, 2) array of (row, col)
    sigma: float

    @property
    def n_kernels(self) -> int:
        return len(self.centers)


def _lattice_axis(extent: int, stride: int) -> NDArray[np.int64]:
    # spread ceil(extent / stride) centers symmetrically across the axis
    count = max(1, -(-extent // stride))
    span = (count - 1) * stride
    start = (extent - 1 - span) // 2
    return start + stride * np.arange(count, dtype=np.int64)


def build_kernel_grid(
    geometry: FrameGeometry,
    radius: int,
    stride: Optional[int] = None,
    sigma: Optional[float] = None,
) -> KernelGrid:
    """Lay out bump centers so every pixel is within ``radius`` of one.

    ``stride`` defaults to ``radius`` and ``sigma`` to ``radius / 2``.
    Raises if the lattice leaves any pixel uncovered.
    """
    if radius < 1:
        raise ValueError("radius must be at least 1 pixel")
    stride = radius if stride is None else stride
    if stride < 1:
        raise ValueError("stride must be at least 1 pixel")
    sigma = radius / 2.0 if sigma is None else float(sigma)
    if sigma <= 0:
        raise ValueError("sigma must be positive")

    rows = _lattice_axis(geometry.height, stride)
    cols = _lattice_axis(geometry.width, stride)

    # the lattice is a full grid, so the nearest-center distance separates
    # into independent row and column terms
    dr2 = np.min((np.arange(geometry.height)[:, None] - rows[None, :]) ** 2, axis=1)
    dc2 = np.min((np.arange(geometry.width)[:, None] - cols[None, :]) ** 2, axis=1)
    if (dr2[:, None] + dc2[None, :]).max() > radius * radius:
        raise ValueError("coverage gap: stride too large for the bump radius")

    centers = np.stack(np.meshgrid(rows, cols, indexing="ij"), axis=-1).reshape(-1, 2)
    return KernelGrid(radius=radius, stride=int(stride), centers=centers, sigma=sigma)


def _bump_template(radius: int, sigma: float) -> Tuple[NDArray[np.int64], NDArray[np.int64], Vector]:
    """Offsets and weights of one bump, truncated to a disk, unit l2 norm."""
    span = np.arange(-radius, radius + 1, dtype=np.int64)
    dr, dc = np.meshgrid(span, span, indexing="ij")
    inside = dr * dr + dc * dc <= radius * radius
    dr, dc = dr[inside], dc[inside]
    w = np.exp(-(dr * dr + dc * dc) / (2.0 * sigma * sigma))
    return dr, dc, w / np.linalg.norm(w)


def kernel_matrix(geometry: FrameGeometry, grid: KernelGrid) -> sparse.csc_matrix:
    """Assemble the bump dictionary as sparse columns (one per center).

    Columns share a unit-norm template; bumps overhanging the frame border
    are clipped, which shrinks their norm slightly.
    """
    dr, dc, w = _bump_template(grid.radius, grid.sigma)
    data, indices, indptr = [], [], [0]
    for r0, c0 in grid.centers:
        rr, cc = r0 + dr, c0 + dc
        keep = (rr >= 0) & (rr < geometry.height) & (cc >= 0) & (cc < geometry.width)
        rows = rr[keep] * geometry.width + cc[keep]
        order = np.argsort(rows)
        indices.append(rows[order])
        data.append(w[keep][order])
        indptr.append(indptr[-1] + int(keep.sum()))
    return sparse.csc_matrix(
        (np.concatenate(data), np.concatenate(indices), np.array(indptr)),
        shape=(geometry.n_pixels, grid.n_kernels),
    )


class Branch(Enum):
    PROFILES_ONLY = "profiles_only"
    PROFILES_PLUS_BLOBS = "profiles_plus_blobs"


@dataclass
class SeudoProblem:
    """One frame's demixing problem.

    ``lam`` weighs the l1 penalty on the bump coefficients only; profile
    activations are never penalized. ``gamma`` is the flat cost the bump
    branch must beat to be selected.
    """

    y: Vector
    geometry: FrameGeometry
    X: Optional[sparse.csc_matrix] = None
    grid: Optional[KernelGrid] = None
    lam: float = DEFAULT_LAMBDA
    gamma: float = 0.0
    W: Optional[sparse.csc_matrix] = None
    _chi: Optional[sparse.csc_matrix] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.y = np.asarray(self.y, dtype=np.float64).ravel()
        if self.y.shape[0] != self.geometry.n_pixels:
            raise ValueError("frame vector length does not match geometry")
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("lam and gamma must be non-negative")
        if self.X is not None and self.X.shape[0] != self.geometry.n_pixels:
            raise ValueError("profile matrix row count does not match geometry")
        if self.grid is not None and self.W is None:
            self.W = kernel_matrix(self.geometry, self.grid)

    @property
    def n_profiles(self) -> int:
        return 0 if self.X is None else self.X.shape[1]

    @property
    def n_kernels(self) -> int:
        return 0 if self.W is None else self.W.shape[1]

    @property
    def dim(self) -> int:
        return self.n_profiles + self.n_kernels

    def chi(self) -> sparse.csc_matrix:
        """Concatenated operator [X, W] as sparse columns."""
        if self._chi is None:
            parts = [m for m in (self.X, self.W) if m is not None]
            if not parts:
                self._chi = sparse.csc_matrix((self.geometry.n_pixels, 0))
            elif len(parts) == 1:
                self._chi = parts[0].tocsc()
            else:
                self._chi = sparse.hstack(parts, format="csc")
        return self._chi

    def l1_weights(self) -> Vector:
        w = np.zeros(self.dim)
        w[self.n_profiles :] = self.lam
        return w


@dataclass
class SeudoSolution:
    """Winning-branch activations and residual for one frame."""

    phi: Vector
    c: Vector
    residual: Vector
    branch: Branch
    cost: float
    report: SolveReport

    def blob_image(self, problem: SeudoProblem) -> Vector:
        """Reconstruction of the bump term W @ c (zero for the plain branch)."""
        if problem.W is None or self.branch is Branch.PROFILES_ONLY:
            return np.zeros(problem.geometry.n_pixels)
        return problem.W @ self.c


def apply_forward(problem: SeudoProblem, psi: Vector) -> Vector:
    """Evaluate X @ phi + W @ c for the stacked coefficient vector."""
    psi = np.asarray(psi, dtype=np.float64).ravel()
    if psi.shape[0] != problem.dim:
        raise ValueError("psi length does not match problem dimension")
    return problem.chi() @ psi


def gradient_two_pass(problem: SeudoProblem, psi: Vector) -> Tuple[float, Vector]:
    """Cost and composite gradient, computed residual-first.

    Pass 1 forms the residual v = y - chi @ psi; pass 2 accumulates
    -2 * chi^T v column by column. The l1 term contributes lam * sign(c)
    with sign(0) = 0, and the cost is ||v||^2 + lam * ||c||_1.
    """
    psi = np.asarray(psi, dtype=np.float64).ravel()
    if psi.shape[0] != problem.dim:
        raise ValueError("psi length does not match problem dimension")
    chi = problem.chi()
    v = problem.y - chi @ psi
    l1 = problem.l1_weights()
    cost = float(v @ v) + float(l1 @ np.abs(psi))
    grad = -2.0 * (chi.T @ v) + l1 * np.sign(psi)
    return cost, grad


def operator_lipschitz(chi: sparse.csc_matrix) -> float:
    """Gershgorin bound 2 * max row sum of |chi^T chi| for non-negative columns.

    For columns with non-negative entries every Gram entry is non-negative,
    so the absolute row sum collapses to an inner product with the column
    sum image; chi^T chi is never formed.
    """
    if chi.nnz == 0 or chi.shape[1] == 0:
        raise ValueError("degenerate operator")
    if chi.data.min() < 0:
        raise ValueError("operator columns must be non-negative")
    total = np.asarray(chi.sum(axis=1)).ravel()
    row_sums = chi.T @ total
    L = 2.0 * float(row_sums.max())
    if L <= 0:
        raise ValueError("degenerate operator")
    return L


def _solve_branch(
    chi: sparse.csc_matrix,
    y: Vector,
    l1: Vector,
    x0: Vector,
    max_iter: int,
    tol: float,
) -> Tuple[Vector, SolveReport]:
    if chi.shape[1] == 0:
        cost = float(y @ y)
        return np.zeros(0), SolveReport(0, cost, True, StopReason.TOLERANCE)
    L = operator_lipschitz(chi)
    return _kernels.solve_nonneg_lasso(chi, y, l1, L, x0, max_iter, tol)


def seudo_solve(
    problem: SeudoProblem,
    warm_start: Optional[Vector] = None,
    max_iter: int = 2000,
    tol: float = 1e-6,
) -> SeudoSolution:
    """Solve both branches and keep the cheaper explanation of the frame.

    Branch A fits profiles alone; branch B adds the bump dictionary with the
    l1 penalty and must win by more than ``gamma``. The branches are compared
    once, after both have converged. ``warm_start`` is the previous frame's
    stacked solution.
    """
    n, k = problem.n_profiles, problem.n_kernels
    if n == 0 and k == 0:
        cost = float(problem.y @ problem.y)
        report = SolveReport(0, cost, True, StopReason.TOLERANCE)
        return SeudoSolution(
            phi=np.zeros(0), c=np.zeros(0), residual=problem.y.copy(),
            branch=Branch.PROFILES_ONLY, cost=cost, report=report,
        )

    if warm_start is None:
        psi0 = np.zeros(n + k)
    else:
        psi0 = np.asarray(warm_start, dtype=np.float64).ravel()
        if psi0.shape[0] != n + k:
            raise ValueError("warm start length does not match problem dimension")

    x_only = problem.X if problem.X is not None else sparse.csc_matrix((problem.geometry.n_pixels, 0))
    phi_a, report_a = _solve_branch(x_only, problem.y, np.zeros(n), psi0[:n], max_iter, tol)
    cost_a = report_a.final_cost

    if k == 0:
        residual = problem.y - (x_only @ phi_a if n else 0.0)
        return SeudoSolution(
            phi=phi_a, c=np.zeros(0), residual=residual,
            branch=Branch.PROFILES_ONLY, cost=cost_a, report=report_a,
        )

    psi_b, report_b = _solve_branch(problem.chi(), problem.y, problem.l1_weights(), psi0, max_iter, tol)
    cost_b = report_b.final_cost

    if cost_a <= cost_b + problem.gamma:
        residual = problem.y - (x_only @ phi_a if n else 0.0)
        return SeudoSolution(
            phi=phi_a, c=np.zeros(k), residual=residual,
            branch=Branch.PROFILES_ONLY, cost=cost_a, report=report_a,
        )
    residual = problem.y - problem.chi() @ psi_b
    return SeudoSolution(
        phi=psi_b[:n], c=psi_b[n:], residual=residual,
        branch=Branch.PROFILES_PLUS_BLOBS, cost=cost_b, report=report_b,
    )
