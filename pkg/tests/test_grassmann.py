import numpy as np
import pytest

from subreg import grassmann as gr
from subreg.errors import CutLocus, ZeroVelocity


def random_orthonormal(rng, n, p):
    return np.linalg.qr(rng.standard_normal((n, p)))[0]


def max_principal_sine(a, b):
    """Largest principal-angle sine; resolves angles below the arccos floor."""
    return np.linalg.svd(b - a @ (a.T @ b), compute_uv=False)[0]


def central_fd(fun, a, h=1e-5):
    g = np.zeros_like(a)
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            ap = a.copy()
            ap[i, j] += h
            am = a.copy()
            am[i, j] -= h
            g[i, j] = (fun(ap) - fun(am)) / (2.0 * h)
    return g


class TestLossL1:
    def test_containment_and_orthogonal(self):
        e = np.eye(5)
        assert gr.loss_l1(e[:, :2], e[:, :1]) == 0.0
        assert abs(gr.loss_l1(e[:, :1], e[:, 1:2]) - 1.0) <= 1e-14

    def test_projector_difference_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            a = rng.standard_normal((50, 8))
            b = rng.standard_normal((50, 3))
            qa = np.linalg.qr(a)[0]
            qb = np.linalg.qr(b)[0]
            oracle = 0.5 * np.linalg.norm(qb @ qb.T - qa @ qa.T) ** 2 - (8 - 3) / 2.0
            assert abs(gr.loss_l1(a, b) - oracle) <= 1e-10

    def test_gauge_invariance(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            a = rng.standard_normal((30, 5))
            b = rng.standard_normal((30, 2))
            ga = rng.standard_normal((5, 5)) + 5 * np.eye(5)
            gb = rng.standard_normal((2, 2)) + 5 * np.eye(2)
            assert abs(gr.loss_l1(a @ ga, b @ gb) - gr.loss_l1(a, b)) <= 1e-9

    def test_range(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((40, 6))
        b = rng.standard_normal((40, 4))
        v = gr.loss_l1(a, b)
        assert 0.0 <= v <= 4.0


class TestLossL2:
    def test_zero_vector(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((20, 4))
        b = rng.standard_normal((20, 2))
        assert gr.loss_l2_stoch(a, b, np.zeros(2)) == 0.0

    def test_orthogonal_full_residual(self):
        e = np.eye(6)
        z = np.array([1.3, -0.4])
        val = gr.loss_l2_stoch(e[:, :2], e[:, 2:4], z)
        assert abs(val - z @ z) <= 1e-12

    def test_projector_residual_identity(self):
        from subreg.numerics import qr_thin

        rng = np.random.default_rng(4)
        a = rng.standard_normal((30, 5))
        b = rng.standard_normal((30, 3))
        z = rng.standard_normal(3)
        # Q_b follows the library's sign convention (part of the loss
        # definition); the projector on span(a) comes from an independent SVD.
        w = qr_thin(b)[0] @ z
        ua = np.linalg.svd(a, full_matrices=False)[0]
        oracle = np.linalg.norm(w - ua @ (ua.T @ w)) ** 2
        assert abs(gr.loss_l2_stoch(a, b, z) - oracle) <= 1e-9
        assert abs(gr.loss_l2_stoch(a, b, z, stabilized=True) - oracle) <= 1e-9

    def test_monte_carlo_mean_equals_l1(self):
        rng = np.random.default_rng(5)
        a = rng.standard_normal((25, 5))
        b = rng.standard_normal((25, 2))
        zs = rng.standard_normal((20000, 2))
        vals = np.array([gr.loss_l2_stoch(a, b, z) for z in zs])
        se = vals.std() / np.sqrt(len(vals))
        assert abs(vals.mean() - gr.loss_l1(a, b)) <= 3.0 * se

    def test_a_gauge_invariance_fixed_z(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            a = rng.standard_normal((20, 4))
            b = rng.standard_normal((20, 2))
            z = rng.standard_normal(2)
            ga = rng.standard_normal((4, 4)) + 4 * np.eye(4)
            assert abs(gr.loss_l2_stoch(a @ ga, b, z) - gr.loss_l2_stoch(a, b, z)) <= 1e-9

    def test_stabilized_matches_plain_well_conditioned(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((40, 6))
        b = rng.standard_normal((40, 3))
        z = rng.standard_normal(3)
        v1 = gr.loss_l2_stoch(a, b, z)
        v2 = gr.loss_l2_stoch(a, b, z, stabilized=True)
        assert abs(v1 - v2) <= 1e-6

    def test_stabilized_finite_at_cond_1e8(self):
        rng = np.random.default_rng(8)
        u = random_orthonormal(rng, 60, 6)
        v = random_orthonormal(rng, 6, 6)
        a = u * np.logspace(0, -8, 6) @ v.T
        b = rng.standard_normal((60, 3))
        z = rng.standard_normal(3)
        val = gr.loss_l2_stoch(a, b, z, stabilized=True)
        assert np.isfinite(val) and val >= 0.0


class TestGradLoss:
    def test_l1_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        a = rng.standard_normal((20, 4))
        b = rng.standard_normal((20, 2))
        g = gr.grad_loss(a, b, "L1")
        fd = central_fd(lambda m: gr.loss_l1(m, b), a)
        assert np.linalg.norm(g - fd) <= 1e-5 * np.linalg.norm(fd)

    @pytest.mark.parametrize("kind", ["L2", "L2stab"])
    def test_l2_matches_finite_differences(self, kind):
        rng = np.random.default_rng(10)
        a = rng.standard_normal((20, 4))
        b = rng.standard_normal((20, 2))
        z = rng.standard_normal(2)
        g = gr.grad_loss(a, b, kind, z=z)
        fd = central_fd(lambda m: gr.loss_l2_stoch(a=m, b=b, z=z, stabilized=kind == "L2stab"), a)
        assert np.linalg.norm(g - fd) <= 1e-5 * np.linalg.norm(fd)

    def test_zero_at_containment(self):
        rng = np.random.default_rng(11)
        u = random_orthonormal(rng, 20, 4)
        g = gr.grad_loss(u, u[:, :2], "L1")
        horizontal = g - u @ (u.T @ g)
        assert np.linalg.norm(horizontal) <= 1e-8

    def test_zero_along_gauge_orbit(self):
        rng = np.random.default_rng(12)
        a = rng.standard_normal((20, 4))
        b = rng.standard_normal((20, 2))
        g = gr.grad_loss(a, b, "L1")
        direction = a @ rng.standard_normal((4, 4))
        assert abs(np.sum(g * direction)) <= 1e-8


class TestLossZ2:
    def test_equal_and_negated(self):
        v = np.array([1.0, -2.0, 0.5])
        assert gr.loss_z2(v, v) == 0.0
        assert gr.loss_z2(v, -v) == 0.0

    def test_orthogonal_unit_vectors(self):
        assert abs(gr.loss_z2(np.array([1.0, 0.0]), np.array([0.0, 1.0])) - np.sqrt(2)) <= 1e-14

    def test_symmetry(self):
        rng = np.random.default_rng(13)
        v, u = rng.standard_normal((2, 7))
        assert gr.loss_z2(v, u) == gr.loss_z2(u, v)


class TestPrincipalAngles:
    def test_identical(self):
        rng = np.random.default_rng(14)
        u = random_orthonormal(rng, 10, 3)
        # arccos near 1 quantizes at ~2e-8, so "all zeros" means below that
        assert gr.principal_angles(u, u).max() <= 1e-7

    def test_orthogonal_planes(self):
        e = np.eye(4)
        angles = gr.principal_angles(e[:, :2], e[:, 2:])
        assert np.allclose(angles, np.pi / 2.0)

    def test_rotated_line(self):
        t = 0.37
        a = np.array([[1.0], [0.0]])
        b = np.array([[np.cos(t)], [np.sin(t)]])
        assert abs(gr.principal_angles(a, b)[0] - t) <= 1e-12

    def test_sum_sin_squared_equals_l1(self):
        rng = np.random.default_rng(15)
        for _ in range(50):
            a = random_orthonormal(rng, 40, 6)
            b = random_orthonormal(rng, 40, 3)
            angles = gr.principal_angles(a, b)
            assert abs(np.sum(np.sin(angles) ** 2) - gr.loss_l1(a, b)) <= 1e-9


class TestLogExp:
    def test_log_of_same_point_and_gauge(self):
        rng = np.random.default_rng(16)
        u = random_orthonormal(rng, 20, 4)
        assert gr.grassmann_log(u, u).norm() <= 1e-12
        g = rng.standard_normal((4, 4)) + 4 * np.eye(4)
        assert gr.grassmann_log(u, np.linalg.qr(u @ g)[0]).norm() <= 1e-10

    def test_roundtrip_100_random_pairs(self):
        rng = np.random.default_rng(17)
        for _ in range(100):
            u0 = random_orthonormal(rng, 30, 4)
            u1 = random_orthonormal(rng, 30, 4)
            tv = gr.grassmann_log(u0, u1)
            back = gr.grassmann_exp(u0, tv.delta, 1.0)
            assert max_principal_sine(back, u1) <= 1e-8

    def test_tangent_is_horizontal(self):
        rng = np.random.default_rng(18)
        u0 = random_orthonormal(rng, 25, 3)
        u1 = random_orthonormal(rng, 25, 3)
        tv = gr.grassmann_log(u0, u1)
        assert np.linalg.norm(u0.T @ tv.delta) <= 1e-10

    def test_cut_locus(self):
        e = np.eye(4)
        with pytest.raises(CutLocus):
            gr.grassmann_log(e[:, :2], e[:, 2:])

    def test_exp_identity_cases(self):
        rng = np.random.default_rng(19)
        u0 = random_orthonormal(rng, 15, 3)
        zero = np.zeros((15, 3))
        assert np.allclose(gr.grassmann_exp(u0, zero, 0.7), u0)
        u1 = random_orthonormal(rng, 15, 3)
        tv = gr.grassmann_log(u0, u1)
        assert np.allclose(gr.grassmann_exp(u0, tv.delta, 0.0), u0)

    def test_exp_orthonormal_output(self):
        rng = np.random.default_rng(20)
        u0 = random_orthonormal(rng, 30, 5)
        u1 = random_orthonormal(rng, 30, 5)
        tv = gr.grassmann_log(u0, u1)
        for t in (0.25, 0.5, 2.0):
            w = gr.grassmann_exp(u0, tv.delta, t)
            assert np.linalg.norm(w.T @ w - np.eye(5)) <= 1e-10

    def test_constant_speed(self):
        rng = np.random.default_rng(21)
        u0 = random_orthonormal(rng, 30, 4)
        u1 = random_orthonormal(rng, 30, 4)
        tv = gr.grassmann_log(u0, u1)
        h = 1e-4
        speeds = []
        for t in (0.0, 0.3, 0.7):
            wp = gr.grassmann_exp(u0, tv.delta, t + h)
            wm = gr.grassmann_exp(u0, tv.delta, t - h)
            speeds.append(np.linalg.norm(wp - wm) / (2.0 * h))
        assert max(speeds) - min(speeds) <= 1e-6
        assert abs(speeds[0] - tv.norm()) <= 1e-6


class TestEmbedGeodesic:
    def test_zero_velocity_rejected(self):
        rng = np.random.default_rng(22)
        u0 = random_orthonormal(rng, 10, 2)
        with pytest.raises(ZeroVelocity):
            gr.embed_geodesic(u0, np.zeros((10, 2)))

    def test_rank_one_velocity_freezes_completely(self):
        rng = np.random.default_rng(23)
        u0 = random_orthonormal(rng, 12, 3)
        y = np.zeros(3)
        y[0] = 1.0
        u_dir = rng.standard_normal(12)
        u_dir -= u0 @ (u0.T @ u_dir)
        u_dir /= np.linalg.norm(u_dir)
        delta = 0.8 * np.outer(u_dir, y)
        w0, tv = gr.embed_geodesic(u0, delta)
        assert tv.norm() <= 1e-12
        for t in (0.3, 1.0, 2.0):
            a = gr.grassmann_exp(u0, delta, t)
            assert gr.loss_l1(w0, a) <= 1e-9

    def test_velocity_norm_reduction(self):
        rng = np.random.default_rng(24)
        u0 = random_orthonormal(rng, 40, 5)
        u1 = random_orthonormal(rng, 40, 5)
        tv = gr.grassmann_log(u0, u1)
        s1 = np.linalg.svd(tv.delta, compute_uv=False)[0]
        w0, tv2 = gr.embed_geodesic(u0, tv.delta)
        assert tv2.norm() < tv.norm()
        assert abs(tv.norm() ** 2 - tv2.norm() ** 2 - s1**2) <= 1e-10
        assert np.linalg.norm(w0.T @ tv2.delta) <= 1e-10

    def test_containment_along_geodesic(self):
        rng = np.random.default_rng(25)
        u0 = random_orthonormal(rng, 40, 5)
        u1 = random_orthonormal(rng, 40, 5)
        tv = gr.grassmann_log(u0, u1)
        w0, tv2 = gr.embed_geodesic(u0, tv.delta)
        for t in np.arange(0.1, 1.0, 0.1):
            a = gr.grassmann_exp(u0, tv.delta, t)
            b = gr.grassmann_exp(w0, tv2.delta, t)
            assert max_principal_sine(b, a) <= 1e-8


def demo_sphere_curve(t):
    """Closed high-winding curve on the unit sphere, as a line in R^3."""
    theta = 7.0 * np.pi * np.cos(2.0 * np.pi * t)
    phi = np.pi / 2.0 + np.pi / 4.0 * np.cos(2.0 * np.pi * t)
    return np.array(
        [np.sin(theta) * np.sin(phi), np.cos(theta) * np.sin(phi), np.cos(phi)]
    ).reshape(3, 1)


def embedded_midpoint_losses(n_samples):
    ts = np.linspace(0.0, 1.0, n_samples)
    samples = [demo_sphere_curve(t) for t in ts]
    curve = gr.embed_curve_pieces(samples, r=2, times=ts)
    losses = []
    for piece in curve.pieces:
        tm = 0.5 * (piece.t0 + piece.t1)
        losses.append(gr.loss_l1(piece.at(tm), demo_sphere_curve(tm)))
    return np.array(losses), curve


class TestEmbedCurve:
    def test_constant_curve(self):
        rng = np.random.default_rng(26)
        u = random_orthonormal(rng, 10, 2)
        bases = gr.embed_curve([u, u, u], r=3)
        assert len(bases) == 3
        for w in bases:
            assert gr.loss_l1(w, u) <= 1e-12
        for first, second in zip(bases, bases[1:]):
            assert gr.principal_angles(first, second).max() <= 1e-9

    def test_demo_curve_alignment_and_smoothing(self):
        losses, curve = embedded_midpoint_losses(512)
        assert losses.max() <= 1e-3
        speeds = np.array([p.speed_sq for p in curve.pieces])
        orig = np.array([p.original_speed_sq for p in curve.pieces])
        assert np.all(speeds <= orig)
        moving = orig > 1e-20
        assert np.all(speeds[moving] < orig[moving])

    def test_refinement_is_fourth_order(self):
        # The construction interpolates the samples exactly, so the
        # mid-interval alignment loss scales like dt^4.
        l512 = embedded_midpoint_losses(512)[0].max()
        l1024 = embedded_midpoint_losses(1024)[0].max()
        assert 12.0 <= l512 / l1024 <= 20.0

    def test_sample_alignment_exact(self):
        rng = np.random.default_rng(27)
        samples = [random_orthonormal(rng, 20, 3)]
        for _ in range(4):
            u1 = np.linalg.qr(samples[-1] + 0.2 * rng.standard_normal((20, 3)))[0]
            samples.append(u1)
        bases = gr.embed_curve(samples, r=5)
        assert all(w.shape == (20, 5) for w in bases)
        for w, v in zip(bases, samples):
            assert gr.loss_l1(w, v) <= 1e-9


class TestSubspaceMetrics:
    def test_relative_error_edges(self):
        e = np.eye(6)
        assert gr.relative_subspace_error(e[:, :3], e[:, :2]) <= 1e-12
        assert abs(gr.relative_subspace_error(e[:, :2], e[:, 2:4]) - 1.0) <= 1e-12

    def test_relative_error_single_angle(self):
        theta = 0.3
        w = np.eye(4)[:, :2]
        v = np.array([[np.cos(theta)], [0.0], [np.sin(theta)], [0.0]])
        assert abs(gr.relative_subspace_error(w, v) - np.sin(theta)) <= 1e-12

    def test_union_dimensions(self):
        e = np.eye(5)
        assert gr.subspace_union([e[:, :1], e[:, :1]]).shape[1] == 1
        assert gr.subspace_union([e[:, :1], e[:, 1:2]]).shape[1] == 2
        rng = np.random.default_rng(28)
        bases = [random_orthonormal(rng, 50, 3) for _ in range(5)]
        assert gr.subspace_union(bases, tol=1e-8).shape[1] == 15
