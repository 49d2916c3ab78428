import numpy as np
import pytest
import scipy.sparse as sp

from subreg import numerics as nm
from subreg.errors import NonFiniteState, RankDeficient, UnstableSystem
from subreg.fields import FieldSample, GridSpec
from subreg.problems import assemble_elliptic


def random_orthonormal(rng, n, p):
    return np.linalg.qr(rng.standard_normal((n, p)))[0]


def max_principal_sine(a, b):
    """Largest principal-angle sine; resolves angles below the arccos floor."""
    return np.linalg.svd(b - a @ (a.T @ b), compute_uv=False)[0]


def conditioned_matrix(rng, n, p, cond):
    u = random_orthonormal(rng, n, p)
    v = random_orthonormal(rng, p, p)
    s = np.logspace(0, -np.log10(cond), p)
    return u * s @ v.T


class TestQrThin:
    def test_identity(self):
        q, r = nm.qr_thin(np.eye(4))
        assert np.allclose(q, np.eye(4))
        assert np.allclose(r, np.eye(4))

    def test_single_column(self):
        q, r = nm.qr_thin(np.array([[3.0], [4.0]]))
        assert np.allclose(q, [[0.6], [0.8]])
        assert np.allclose(r, [[5.0]])

    def test_reconstruction(self):
        rng = np.random.default_rng(0)
        m = rng.standard_normal((50, 10))
        q, r = nm.qr_thin(m)
        assert np.linalg.norm(q @ r - m) <= 1e-12 * np.linalg.norm(m)
        assert np.linalg.norm(q.T @ q - np.eye(10)) <= 1e-12
        assert np.all(np.diag(r) > 0)

    def test_rank_deficient(self):
        rng = np.random.default_rng(1)
        u = random_orthonormal(rng, 20, 3)
        with pytest.raises(RankDeficient):
            nm.qr_thin(u * np.array([1.0, 1.0, 1e-15]))


class TestCholeskyQr2:
    def test_idempotent_on_orthonormal(self):
        rng = np.random.default_rng(2)
        u = random_orthonormal(rng, 30, 5)
        q = nm.cholesky_qr2(u)
        assert max_principal_sine(u, q) <= 1e-14

    def test_orthogonality_at_cond_1e7(self):
        rng = np.random.default_rng(3)
        m = conditioned_matrix(rng, 100, 5, 1e7)
        q = nm.cholesky_qr2(m)
        assert np.linalg.norm(q.T @ q - np.eye(5)) <= 1e-13
        # same column space as Householder QR
        assert max_principal_sine(np.linalg.qr(m)[0], q) <= 1e-10

    def test_rank_one_limit(self):
        rng = np.random.default_rng(4)
        u = random_orthonormal(rng, 20, 2)
        with pytest.raises(RankDeficient):
            nm.cholesky_qr2(u * np.array([1.0, 1e-14]))

    def test_column_space_matches_qr(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            cond = 10 ** rng.uniform(0, 6)
            m = conditioned_matrix(rng, 40, 4, cond)
            q1 = nm.qr_thin(m)[0]
            q2 = nm.cholesky_qr2(m)
            assert max_principal_sine(q1, q2) <= 1e-9

    def test_combined_r_factor(self):
        rng = np.random.default_rng(6)
        m = rng.standard_normal((30, 4))
        q, r = nm.cholesky_qr2(m, return_r=True)
        assert np.linalg.norm(q @ r - m) <= 1e-12 * np.linalg.norm(m)


class TestSymEig:
    def test_1d_laplacian_analytic(self):
        grid = GridSpec(extents=(99,))
        op = assemble_elliptic([FieldSample(grid=grid, values=np.ones(99))], grid)
        eig = nm.sym_eig_smallest(op, 3)
        h = 1.0 / 100.0
        lam1 = (2.0 / h**2) * (1.0 - np.cos(np.pi / 100.0))
        assert abs(eig.values[0] - lam1) <= 1e-8 * lam1

    def test_diagonal_operator(self):
        n = 30
        op = sp.diags(np.arange(1.0, n + 1)).tocsr()
        eig = nm.sym_eig_smallest(op, 5)
        assert np.allclose(eig.values, np.arange(1.0, 6.0))
        for j in range(5):
            v = np.abs(eig.vectors[:, j])
            assert v[j] > 0.999

    def test_2d_tensor_product_spectrum(self):
        grid = GridSpec(extents=(10, 10))
        op = assemble_elliptic([FieldSample(grid=grid, values=np.ones((10, 10)))], grid)
        eig = nm.sym_eig_smallest(op, 6)
        h = 1.0 / 11.0
        oned = np.array([(2.0 / h**2) * (1.0 - np.cos(np.pi * k * h)) for k in range(1, 11)])
        tensor = np.sort((oned[:, None] + oned[None, :]).ravel())[:6]
        assert np.allclose(eig.values, tensor, rtol=1e-10)

    def test_sparse_path_matches_dense(self):
        grid = GridSpec(extents=(20, 20))
        rng = np.random.default_rng(7)
        k = FieldSample(grid=grid, values=rng.uniform(1.0, 50.0, (20, 20)))
        op = assemble_elliptic([k], grid)
        dense = nm.sym_eig_smallest(op, 4)
        sparse = nm.sym_eig_smallest(op, 4, dense_max_dim=0)
        assert np.allclose(dense.values, sparse.values, rtol=1e-9)

    def test_residuals_and_orthonormality_random_stencils(self):
        rng = np.random.default_rng(8)
        for trial in range(200):
            n = int(rng.integers(6, 14))
            grid = GridSpec(extents=(n, n))
            k = FieldSample(grid=grid, values=rng.uniform(0.5, 20.0, (n, n)))
            op = assemble_elliptic([k], grid)
            m = int(rng.integers(1, 5))
            eig = nm.sym_eig_smallest(op, m)
            lam_max = nm.sym_eig_largest(op, 1).values[-1]
            a = op.matrix
            for j in range(m):
                res = np.linalg.norm(a @ eig.vectors[:, j] - eig.values[j] * eig.vectors[:, j])
                assert res <= 1e-8 * lam_max
            assert np.linalg.norm(eig.vectors.T @ eig.vectors - np.eye(m)) <= 1e-10
            assert np.all(np.diff(eig.values) >= -1e-12)


class TestLyapunov:
    def test_scalar_closed_form(self):
        x = nm.solve_lyapunov(np.array([[-2.0]]), np.array([[9.0]]))
        assert abs(x[0, 0] - 9.0 / 4.0) <= 1e-12

    def test_diagonal_closed_form(self):
        rng = np.random.default_rng(9)
        d = -rng.uniform(0.5, 3.0, 6)
        a = np.diag(d)
        q = rng.standard_normal((6, 6))
        q = q @ q.T
        x = nm.solve_lyapunov(a, q)
        expected = -q / (d[:, None] + d[None, :])
        assert np.allclose(x, expected, atol=1e-12)

    def test_random_stable_residual(self):
        rng = np.random.default_rng(10)
        a = rng.standard_normal((20, 20))
        a = -(a @ a.T) / 20.0 - 0.3 * np.eye(20)
        q = rng.standard_normal((20, 20))
        q = q @ q.T
        x = nm.solve_lyapunov(a, q)
        res = np.linalg.norm(a @ x + x @ a.T + q)
        assert res <= 1e-10 * np.linalg.norm(q)
        assert np.linalg.norm(x - x.T) <= 1e-12 * np.linalg.norm(x)
        assert np.linalg.eigvalsh(x).min() >= -1e-10 * np.linalg.norm(x)

    def test_unstable_rejected(self):
        with pytest.raises(UnstableSystem):
            nm.solve_lyapunov(np.array([[1e-3]]), np.array([[1.0]]))


class TestRk4:
    def test_constant_field(self):
        traj = nm.rk4_integrate(lambda t, y: np.zeros_like(y), np.array([1.0, 2.0]), 0.0, 1.0, 10)
        assert np.allclose(traj, np.array([1.0, 2.0]))

    def test_exponential(self):
        traj = nm.rk4_integrate(lambda t, y: y, np.array([1.0]), 0.0, 1.0, 100)
        assert abs(traj[-1, 0] - np.e) <= 1e-6

    def test_fourth_order_convergence(self):
        def f(t, y):
            return np.array([np.sin(t) * y[0]])

        exact = np.exp(1.0 - np.cos(2.0))
        e100 = abs(nm.rk4_integrate(f, np.array([1.0]), 0.0, 2.0, 100)[-1, 0] - exact)
        e200 = abs(nm.rk4_integrate(f, np.array([1.0]), 0.0, 2.0, 200)[-1, 0] - exact)
        assert 12.0 <= e100 / e200 <= 20.0

    def test_non_finite_state(self):
        with pytest.raises(NonFiniteState):
            nm.rk4_integrate(lambda t, y: y**2, np.array([5.0]), 0.0, 10.0, 20)
