"""Model tests: grid coverage, implicit operator vs dense oracle, branching."""

import numpy as np
import pytest
from scipy import sparse

from streamdemix.model import (
    Branch,
    FrameGeometry,
    SeudoProblem,
    apply_forward,
    build_kernel_grid,
    gradient_two_pass,
    kernel_matrix,
    operator_lipschitz,
    seudo_solve,
)
from streamdemix.optimizer import DenseColumns, lipschitz_bounds

from oracles import central_diff_grad


def gaussian_footprint(geometry, row, col, sig, support):
    """Unit-norm truncated Gaussian profile as a sparse column."""
    rr, cc = np.meshgrid(np.arange(geometry.height), np.arange(geometry.width), indexing="ij")
    d2 = (rr - row) ** 2 + (cc - col) ** 2
    img = np.where(d2 <= support * support, np.exp(-d2 / (2.0 * sig * sig)), 0.0)
    img /= np.linalg.norm(img)
    return sparse.csc_matrix(img.ravel()[:, None])


def small_problem(seed=0, lam=0.1, gamma=0.0):
    np.random.seed(seed)
    geom = FrameGeometry(width=12, height=10)
    X = sparse.hstack(
        [gaussian_footprint(geom, 3, 3, 1.5, 4), gaussian_footprint(geom, 6, 8, 1.5, 4)],
        format="csc",
    )
    grid = build_kernel_grid(geom, radius=3, stride=2)
    y = np.abs(np.random.randn(geom.n_pixels))
    return SeudoProblem(y=y, geometry=geom, X=X, grid=grid, lam=lam, gamma=gamma)


class TestKernelGrid:
    def test_stride_one_covers_every_pixel(self):
        """Stride 1 on a 10x10 frame places one bump per pixel."""
        grid = build_kernel_grid(FrameGeometry(10, 10), radius=2, stride=1)
        assert grid.n_kernels == 100

    def test_coarse_lattice_frozen_count(self):
        """90x90 frame at radius and stride 15 needs exactly 36 bumps."""
        geom = FrameGeometry(90, 90)
        grid = build_kernel_grid(geom, radius=15, stride=15)
        assert grid.n_kernels == 36
        # exhaustive coverage scan
        rr, cc = np.meshgrid(np.arange(90), np.arange(90), indexing="ij")
        d2 = np.full(rr.shape, np.inf)
        for r0, c0 in grid.centers:
            d2 = np.minimum(d2, (rr - r0) ** 2 + (cc - c0) ** 2)
        assert d2.max() <= 15 * 15

    def test_stride_density_ratio(self):
        """Doubling the stride cuts the bump count to a quarter."""
        geom = FrameGeometry(20, 20)
        k1 = build_kernel_grid(geom, radius=3, stride=1).n_kernels
        k2 = build_kernel_grid(geom, radius=3, stride=2).n_kernels
        assert k1 == 4 * k2

    def test_coverage_gap_raises(self):
        with pytest.raises(ValueError, match="coverage gap"):
            build_kernel_grid(FrameGeometry(30, 30), radius=2, stride=10)

    def test_centers_inside_frame(self):
        geom = FrameGeometry(17, 23)
        grid = build_kernel_grid(geom, radius=4, stride=3)
        assert grid.centers[:, 0].min() >= 0 and grid.centers[:, 0].max() < 23
        assert grid.centers[:, 1].min() >= 0 and grid.centers[:, 1].max() < 17
        assert grid.n_kernels <= geom.n_pixels

    def test_default_sigma_is_half_radius(self):
        grid = build_kernel_grid(FrameGeometry(20, 20), radius=6)
        assert grid.sigma == 3.0
        assert grid.stride == 6


class TestForwardOperator:
    def test_zero_psi_gives_zero_frame(self):
        problem = small_problem()
        out = apply_forward(problem, np.zeros(problem.dim))
        assert np.all(out == 0.0)

    def test_unit_coefficient_reproduces_bump(self):
        """A single bump coefficient renders that bump's image."""
        problem = small_problem()
        k = problem.n_profiles + 7
        psi = np.zeros(problem.dim)
        psi[k] = 1.0
        out = apply_forward(problem, psi)
        assert np.allclose(out, problem.W[:, 7].toarray().ravel())
        r0, c0 = problem.grid.centers[7]
        assert out[r0 * problem.geometry.width + c0] == out.max()

    def test_matches_dense_oracle(self):
        """Sparse forward agrees with an explicitly built dense operator."""
        np.random.seed(5)
        problem = small_problem()
        dense = np.hstack([problem.X.toarray(), problem.W.toarray()])
        for _ in range(5):
            psi = np.abs(np.random.randn(problem.dim))
            assert np.max(np.abs(apply_forward(problem, psi) - dense @ psi)) <= 1e-10

    def test_dimension_mismatch_raises(self):
        problem = small_problem()
        with pytest.raises(ValueError, match="dimension"):
            apply_forward(problem, np.zeros(problem.dim + 1))


class TestGradient:
    def test_stationary_at_least_squares_optimum(self):
        """The smooth gradient vanishes at the unpenalized optimum."""
        problem = small_problem(lam=0.0)
        dense = np.hstack([problem.X.toarray(), problem.W.toarray()])
        psi_star, *_ = np.linalg.lstsq(dense, problem.y, rcond=None)
        _, grad = gradient_two_pass(problem, psi_star)
        assert np.max(np.abs(grad)) <= 1e-8

    def test_matches_finite_differences(self):
        """Composite gradient matches central differences away from zeros."""
        np.random.seed(6)
        problem = small_problem(lam=0.2)

        def f(psi):
            return gradient_two_pass(problem, psi)[0]

        for _ in range(10):
            psi = 0.5 + np.abs(np.random.randn(problem.dim))
            _, grad = gradient_two_pass(problem, psi)
            gfd = central_diff_grad(f, psi)
            assert np.allclose(grad, gfd, rtol=1e-5, atol=1e-6)

    def test_matches_dense_composite_oracle(self):
        """Two-pass gradient equals -2 chi^T (y - chi psi) + lam * sign."""
        np.random.seed(8)
        problem = small_problem(lam=0.3)
        dense = np.hstack([problem.X.toarray(), problem.W.toarray()])
        l1 = np.zeros(problem.dim)
        l1[problem.n_profiles :] = problem.lam
        for _ in range(5):
            psi = np.abs(np.random.randn(problem.dim))
            psi[np.random.rand(problem.dim) < 0.3] = 0.0
            cost, grad = gradient_two_pass(problem, psi)
            v = problem.y - dense @ psi
            want_cost = v @ v + l1 @ np.abs(psi)
            want_grad = -2.0 * dense.T @ v + l1 * np.sign(psi)
            assert abs(cost - want_cost) <= 1e-10 * max(1.0, abs(want_cost))
            assert np.max(np.abs(grad - want_grad)) <= 1e-10

    def test_forward_adjoint_consistency(self):
        """<chi psi, v> equals <psi, chi^T v> for random vectors."""
        np.random.seed(9)
        problem = small_problem()
        chi = problem.chi()
        for _ in range(10):
            psi = np.random.randn(problem.dim)
            v = np.random.randn(problem.geometry.n_pixels)
            lhs = float((chi @ psi) @ v)
            rhs = float(psi @ (chi.T @ v))
            assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


class TestOperatorLipschitz:
    def test_matches_dense_gershgorin(self):
        """Column-sum shortcut equals the dense Gershgorin bound exactly."""
        problem = small_problem()
        chi = problem.chi()
        dense = chi.toarray()
        want = 2.0 * np.abs(dense.T @ dense).sum(axis=1).max()
        got = operator_lipschitz(chi)
        assert got == pytest.approx(want, rel=1e-12)
        assert got == pytest.approx(lipschitz_bounds(DenseColumns(dense)).max(), rel=1e-12)

    def test_rejects_negative_columns(self):
        bad = sparse.csc_matrix(np.array([[1.0, -0.5], [0.0, 1.0]]))
        with pytest.raises(ValueError, match="non-negative"):
            operator_lipschitz(bad)

    def test_empty_operator_raises(self):
        with pytest.raises(ValueError, match="degenerate"):
            operator_lipschitz(sparse.csc_matrix((10, 0)))


class TestSeudoSolve:
    def test_pure_profile_scene_stays_on_plain_branch(self):
        """A frame exactly explained by profiles never pays for bumps."""
        problem = small_problem(lam=0.1, gamma=0.1)
        phi_star = np.array([2.0, 1.0])
        problem.y = problem.X @ phi_star
        sol = seudo_solve(problem)
        assert sol.branch is Branch.PROFILES_ONLY
        assert np.allclose(sol.phi, phi_star, atol=1e-4)
        assert np.max(np.abs(sol.residual)) <= 1e-3

    def test_lone_blob_takes_bump_branch(self):
        """Unexplained structure is absorbed by bumps, not by profiles."""
        geom = FrameGeometry(16, 16)
        X = gaussian_footprint(geom, 3, 3, 1.2, 3)
        grid = build_kernel_grid(geom, radius=3, stride=2)
        blob = gaussian_footprint(geom, 11, 11, 1.6, 4).toarray().ravel()
        problem = SeudoProblem(y=2.0 * blob, geometry=geom, X=X, grid=grid, lam=0.02, gamma=1e-6)
        sol = seudo_solve(problem)
        assert sol.branch is Branch.PROFILES_PLUS_BLOBS
        assert np.all(np.abs(sol.phi) <= 0.05)
        recon = sol.blob_image(problem)
        cosine = recon @ blob / (np.linalg.norm(recon) * np.linalg.norm(blob))
        assert cosine >= 0.9

    def test_huge_gamma_forces_plain_branch(self):
        problem = small_problem(lam=0.05, gamma=1e12)
        sol = seudo_solve(problem)
        assert sol.branch is Branch.PROFILES_ONLY

    def test_empty_problem_returns_frame_as_residual(self):
        geom = FrameGeometry(6, 5)
        y = np.arange(30, dtype=float)
        sol = seudo_solve(SeudoProblem(y=y, geometry=geom))
        assert sol.branch is Branch.PROFILES_ONLY
        assert sol.phi.size == 0 and sol.c.size == 0
        assert np.all(sol.residual == y)

    def test_bump_branch_cost_never_above_plain(self):
        """Setting c = 0 is feasible, so the bump branch optimum cannot lose."""
        for seed in range(3):
            problem = small_problem(seed=seed, lam=0.1, gamma=0.0)
            sol_b = seudo_solve(problem)
            problem_a = SeudoProblem(
                y=problem.y, geometry=problem.geometry, X=problem.X, lam=0.0, gamma=0.0
            )
            sol_a = seudo_solve(problem_a)
            assert sol_b.cost <= sol_a.cost + 1e-9 * max(1.0, sol_a.cost)

    def test_solution_cost_consistent_with_residual(self):
        problem = small_problem(seed=2, lam=0.15)
        sol = seudo_solve(problem)
        want = sol.residual @ sol.residual + problem.lam * np.abs(sol.c).sum()
        assert sol.cost == pytest.approx(want, rel=1e-9)

    def test_warm_start_never_worse(self):
        """Restarting from the converged solution cannot raise the cost."""
        problem = small_problem(seed=3, lam=0.1)
        cold = seudo_solve(problem)
        warm = seudo_solve(problem, warm_start=np.concatenate([cold.phi, cold.c]))
        assert warm.cost <= cold.cost + 1e-6 * max(1.0, cold.cost)

    def test_warm_start_length_checked(self):
        problem = small_problem()
        with pytest.raises(ValueError, match="warm start"):
            seudo_solve(problem, warm_start=np.zeros(problem.dim + 2))


class TestRobustnessMechanism:
    def test_bump_branch_shields_profile_estimate(self):
        """With an overlapping unknown blob active, the bump branch recovers
        the profile activation strictly better than plain least squares.

        Bumps must be smaller than the cell: a dictionary that can mimic the
        cell itself makes the split ill-determined.
        """
        geom = FrameGeometry(28, 28)
        A = gaussian_footprint(geom, 14, 11, 2.5, 7)
        a_vec = A.toarray().ravel()
        grid = build_kernel_grid(geom, radius=2, stride=2)
        offsets = [3, 4, 5, 6, 7]
        amplitudes = np.linspace(0.5, 5.0, 10)
        for off in offsets:
            blob = gaussian_footprint(geom, 14, 11 + off, 1.2, 4).toarray().ravel()
            overlap = float(a_vec @ blob)
            assert overlap > 0.0
            for a in amplitudes:
                y = a_vec + a * blob
                # closed-form plain non-negative least squares on the lone profile
                phi_nnls = max(0.0, float(a_vec @ y))
                problem = SeudoProblem(y=y, geometry=geom, X=A, grid=grid, lam=0.02, gamma=0.0)
                sol = seudo_solve(problem)
                assert sol.branch is Branch.PROFILES_PLUS_BLOBS
                assert abs(sol.phi[0] - 1.0) < abs(phi_nnls - 1.0)
