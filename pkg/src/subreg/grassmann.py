"""Subspace losses, gradients, geodesics, and the velocity-reducing embedding.

A point on Gr(p, n) is represented by an (n, p) matrix with orthonormal
columns; any two representatives of the same subspace differ by a right
multiplication with an invertible p x p matrix, and every loss below is
invariant under that gauge freedom.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import CutLocus, ZeroVelocity
from .numerics import cholesky_qr2, qr_thin

# Smallest singular value of U0^T U1 below which log() refuses to proceed.
CUT_LOCUS_TOL = 1e-10


@dataclass
class TangentVector:
    """Horizontal tangent at ``base``: ``base.T @ delta == 0``."""

    base: np.ndarray
    delta: np.ndarray

    def norm(self):
        return float(np.linalg.norm(self.delta))


def orthonormalize(a):
    """Orthonormal representative of the column span of ``a`` (Cholesky-QR2)."""
    return cholesky_qr2(a)


def _ortho_factor(a):
    """Householder-QR orthonormal factor, robust for generic loss inputs."""
    return qr_thin(a)[0]


def loss_l1(a, b):
    """Projector-based subspace loss ``p - ||Q_b^T Q_a||_F^2``.

    ``a`` is (n, k), ``b`` is (n, p) with p <= k.  The value lies in [0, p],
    vanishes exactly when span(b) is contained in span(a), and is invariant
    under right multiplication of either argument by an invertible matrix.
    """
    qa = _ortho_factor(a)
    qb = _ortho_factor(b)
    if qb.shape[1] > qa.shape[1]:
        raise ValueError("loss_l1: second argument must not have more columns")
    p = qb.shape[1]
    value = p - np.linalg.norm(qb.T @ qa) ** 2
    return max(float(value), 0.0)


def _lstsq_coeffs(a, w, stabilized):
    """Minimize ||a u - w|| via normal equations or the Cholesky-QR2 factor."""
    if stabilized:
        q, r = cholesky_qr2(a, return_r=True)
        return scipy.linalg.solve_triangular(r, q.T @ w, lower=False)
    g = a.T @ a
    c, low = scipy.linalg.cho_factor(g)
    return scipy.linalg.cho_solve((c, low), a.T @ w)


def loss_l2_stoch(a, b, z, stabilized=False):
    """Stochastic one-projector loss ``min_u ||a u - Q_b z||_2^2``.

    Equals ``||(I - P_a) Q_b z||^2``; averaging over isotropic ``z`` with
    identity covariance recovers :func:`loss_l1`.  The least-squares problem
    is solved through the normal equations by default, or through a
    Cholesky-QR2 factorization of ``a`` when ``stabilized`` is set.
    """
    z = np.asarray(z, dtype=float)
    qb = _ortho_factor(b)
    w = qb @ z
    if stabilized:
        qa = cholesky_qr2(a)
        resid = w - qa @ (qa.T @ w)
    else:
        u = _lstsq_coeffs(a, w, stabilized=False)
        resid = w - a @ u
    return max(float(resid @ resid), 0.0)


def grad_loss(a, b, kind="L1", z=None):
    """Analytic gradient of a subspace loss with respect to ``a``.

    ``kind`` is one of ``L1``, ``L2``, ``L2stab``; the latter two require
    the random vector ``z``.  Shapes follow the corresponding loss.
    """
    a = np.asarray(a, dtype=float)
    if kind == "L1":
        qa, ra = qr_thin(a)
        qb = _ortho_factor(b)
        # d/dA tr(P_a P_b) = 2 (I - P_a) P_b A (A^T A)^{-1}, and A (A^T A)^{-1} = Q R^{-T}
        ar_inv = scipy.linalg.solve_triangular(ra, qa.T, lower=False).T
        m = qb @ (qb.T @ ar_inv)
        return -2.0 * (m - qa @ (qa.T @ m))
    if kind in ("L2", "L2stab"):
        if z is None:
            raise ValueError("grad_loss: L2 kinds need the random vector z")
        qb = _ortho_factor(b)
        w = qb @ np.asarray(z, dtype=float)
        u = _lstsq_coeffs(a, w, stabilized=(kind == "L2stab"))
        resid = w - a @ u
        return -2.0 * np.outer(resid, u)
    raise ValueError(f"grad_loss: unknown kind {kind!r}")


def loss_z2(v, u):
    """Sign-insensitive vector distance ``min(||v - u||, ||v + u||)``."""
    v = np.asarray(v, dtype=float).ravel()
    u = np.asarray(u, dtype=float).ravel()
    if v.shape != u.shape:
        raise ValueError("loss_z2: arguments must have equal length")
    return float(min(np.linalg.norm(v - u), np.linalg.norm(v + u)))


def principal_angles(a, b):
    """Principal angles between two orthonormal bases, ascending, in [0, pi/2].

    The cosines are the singular values of ``a.T @ b`` clipped to [0, 1];
    the squared sines sum to :func:`loss_l1` of the pair.
    """
    s = np.linalg.svd(np.asarray(a).T @ np.asarray(b), compute_uv=False)
    return np.sort(np.arccos(np.clip(s, 0.0, 1.0)))


def grassmann_log(u0, u1):
    """Tangent at ``u0`` whose geodesic reaches the subspace of ``u1`` at t=1.

    Raises :class:`CutLocus` when a principal angle reaches pi/2, i.e. when
    ``u0.T @ u1`` is numerically singular.
    """
    u0 = np.asarray(u0, dtype=float)
    u1 = np.asarray(u1, dtype=float)
    m = u0.T @ u1
    smin = np.linalg.svd(m, compute_uv=False).min()
    if smin < CUT_LOCUS_TOL:
        raise CutLocus("grassmann_log: subspaces are on the cut locus")
    # (I - u0 u0^T) u1 m^{-1}, then arctan of its singular values.
    x = np.linalg.solve(m.T, (u1 - u0 @ m).T).T
    u, s, vt = np.linalg.svd(x, full_matrices=False)
    delta = (u * np.arctan(s)) @ vt
    return TangentVector(base=u0, delta=delta)


def grassmann_exp(u0, delta, t=1.0):
    """Geodesic through ``u0`` with horizontal velocity ``delta`` at time t."""
    u0 = np.asarray(u0, dtype=float)
    if isinstance(delta, TangentVector):
        delta = delta.delta
    u, s, vt = np.linalg.svd(np.asarray(delta, dtype=float), full_matrices=False)
    return (u0 @ vt.T) * np.cos(s * t) @ vt + (u * np.sin(s * t)) @ vt


def _canonical_sign(v):
    nz = np.nonzero(v)[0]
    if nz.size == 0:
        return v
    return v * np.sign(v[nz[0]])


def _pick_top_direction(u, s):
    """Index of the direction to freeze: largest singular value, ties broken
    by the lexicographically largest sign-canonicalized left vector."""
    smax = s[0]
    candidates = [i for i in range(s.size) if s[i] >= smax * (1.0 - 1e-12)]
    return max(candidates, key=lambda i: tuple(_canonical_sign(u[:, i])))


def embed_geodesic(u0, delta):
    """Grow the subspace by one dimension and freeze the fastest direction.

    Given a geodesic through ``u0`` with velocity ``delta``, returns a base
    ``w0 = [u0 | u1]`` one dimension larger together with a velocity whose
    top singular direction is removed, so that the new geodesic contains the
    old one at every time while ``||delta'||_F^2 = ||delta||_F^2 - s1^2``.

    Raises :class:`ZeroVelocity` for a vanishing ``delta``.
    """
    u0 = np.asarray(u0, dtype=float)
    if isinstance(delta, TangentVector):
        delta = delta.delta
    delta = np.asarray(delta, dtype=float)
    if np.linalg.norm(delta) == 0.0:
        raise ZeroVelocity("embed_geodesic: velocity is zero")
    u, s, vt = np.linalg.svd(delta, full_matrices=False)
    j = _pick_top_direction(u, s)
    w0 = np.hstack([u0, u[:, j : j + 1]])
    s_frozen = s.copy()
    s_frozen[j] = 0.0
    new_delta = np.hstack([(u * s_frozen) @ vt, np.zeros((u0.shape[0], 1))])
    return w0, TangentVector(base=w0, delta=new_delta)


def _pad_orthonormal(w, count):
    """Append ``count`` deterministic orthonormal columns orthogonal to ``w``."""
    n = w.shape[0]
    cols = []
    basis = w
    i = 0
    while len(cols) < count:
        if i >= n:
            raise ValueError("cannot pad beyond the ambient dimension")
        v = np.zeros(n)
        v[i] = 1.0
        v = v - basis @ (basis.T @ v)
        nv = np.linalg.norm(v)
        if nv > 1e-8:
            v /= nv
            cols.append(v)
            basis = np.hstack([basis, v[:, None]])
        i += 1
    return basis


@dataclass
class GeodesicPiece:
    """One interval of an embedded piecewise-geodesic curve."""

    t0: float
    t1: float
    base: np.ndarray
    delta: np.ndarray
    speed_sq: float
    original_speed_sq: float

    def at(self, t):
        s = (t - self.t0) / (self.t1 - self.t0)
        if np.linalg.norm(self.delta) == 0.0:
            return self.base
        return grassmann_exp(self.base, self.delta, s)


class EmbeddedCurve:
    """Piecewise-geodesic embedding of a sampled subspace curve."""

    def __init__(self, pieces):
        self.pieces = pieces

    def at(self, t):
        for piece in self.pieces:
            if piece.t0 <= t <= piece.t1:
                return piece.at(t)
        raise ValueError(f"time {t} outside curve range")

    def bases(self):
        """Embedded bases at the original sample times."""
        out = [piece.at(piece.t0) for piece in self.pieces]
        out.append(self.pieces[-1].at(self.pieces[-1].t1))
        return out


def embed_curve_pieces(samples, r, times=None):
    """Build the piecewise-geodesic embedding of a sampled curve.

    ``samples`` are (n, k) orthonormal bases at increasing times; each
    interval is replaced by a geodesic in Gr(r, n) obtained by freezing the
    r - k fastest velocity directions of the interval log.  When the interval
    velocity has fewer than r - k nonzero directions the base is padded with
    deterministic orthogonal complements.
    """
    k = samples[0].shape[1]
    if r <= k:
        raise ValueError("embed_curve: target dimension must exceed k")
    if times is None:
        times = np.arange(len(samples), dtype=float)
    pieces = []
    for i in range(len(samples) - 1):
        tv = grassmann_log(samples[i], samples[i + 1])
        w, d = samples[i], tv.delta
        for _ in range(r - k):
            # Noise-level velocities pad deterministically instead of
            # freezing a roundoff direction.
            if np.linalg.norm(d) <= 1e-12:
                w = _pad_orthonormal(w, 1)
                d = np.hstack([d, np.zeros((w.shape[0], 1))])
            else:
                w, tv_new = embed_geodesic(w, d)
                d = tv_new.delta
        dt = times[i + 1] - times[i]
        pieces.append(
            GeodesicPiece(
                t0=float(times[i]),
                t1=float(times[i + 1]),
                base=w,
                delta=d,
                speed_sq=float(np.linalg.norm(d) ** 2 / dt**2),
                original_speed_sq=float(np.linalg.norm(tv.delta) ** 2 / dt**2),
            )
        )
    return EmbeddedCurve(pieces)


def embed_curve(samples, r, times=None):
    """Embedded bases at the sample times; see :func:`embed_curve_pieces`."""
    return embed_curve_pieces(samples, r, times=times).bases()


def relative_subspace_error(w, v):
    """RMS sine of the principal angles of ``v`` against the larger ``w``."""
    p = np.asarray(v).shape[1]
    return float(np.sqrt(loss_l1(w, v) / p))


def subspace_union(bases, tol=1e-10):
    """Orthonormal basis of the joint column span of several bases."""
    stacked = np.hstack([np.asarray(b, dtype=float) for b in bases])
    u, s, _ = np.linalg.svd(stacked, full_matrices=False)
    rank = int(np.sum(s > tol))
    return u[:, :rank]
