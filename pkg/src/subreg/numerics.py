"""Dense linear-algebra kernels the rest of the package builds on.

Everything here is a pure function of its inputs; no global state.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConvergenceFailure, NonFiniteState, RankDeficient, UnstableSystem

# Relative tolerance below which a triangular diagonal is treated as rank loss.
RANK_TOL = 1e-12
# Largest dimension handled by the dense symmetric eigensolver.
DENSE_EIG_MAX_DIM = 4096


@dataclass
class EigDecomposition:
    """Partial symmetric eigendecomposition, eigenvalues sorted ascending."""

    values: np.ndarray
    vectors: np.ndarray


def qr_thin(m):
    """Thin QR factorization with a positive-diagonal sign convention.

    Parameters
    ----------
    m : (n, p) array, n >= p, full column rank.

    Returns
    -------
    q : (n, p) array with orthonormal columns.
    r : (p, p) upper-triangular array with positive diagonal.

    Raises
    ------
    RankDeficient
        If the smallest |R_ii| is at most RANK_TOL times the largest.
    """
    m = np.asarray(m, dtype=float)
    q, r = np.linalg.qr(m)
    diag = np.abs(np.diag(r))
    if diag.size and diag.min() <= RANK_TOL * diag.max():
        raise RankDeficient("qr_thin: matrix is numerically rank deficient")
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs, r * signs[:, None]


def _cholesky_qr(m):
    """One Cholesky-QR pass, with an escalating diagonal shift fallback."""
    g = m.T @ m
    scale = np.trace(g)
    shift = 0.0
    for _ in range(4):
        try:
            r = scipy.linalg.cholesky(g + shift * np.eye(g.shape[0]), lower=False)
            break
        except scipy.linalg.LinAlgError:
            shift = max(10 * shift, 1e-15 * scale)
    else:
        raise RankDeficient("cholesky_qr: Gram matrix is not positive definite")
    diag = np.diag(r)
    if diag.min() <= RANK_TOL * diag.max():
        raise RankDeficient("cholesky_qr: matrix is numerically rank deficient")
    q = scipy.linalg.solve_triangular(r, m.T, trans="T", lower=False).T
    return q, r


def cholesky_qr2(m, return_r=False):
    """Orthonormalize the columns of ``m`` with two Cholesky-QR passes.

    Two passes keep ``||Q^T Q - I||_F`` at machine level for condition
    numbers up to roughly 1e7; a small diagonal shift is used as a fallback
    so moderately worse inputs still produce a finite orthonormal basis.

    Parameters
    ----------
    m : (n, p) array with numerically full column rank.
    return_r : bool
        If True also return the combined upper-triangular factor such that
        ``m = q @ r``.

    Raises
    ------
    RankDeficient
        If a Cholesky factorization fails outright or the triangular
        diagonal collapses below RANK_TOL relative to its largest entry.
    """
    m = np.asarray(m, dtype=float)
    q, r1 = _cholesky_qr(m)
    q, r2 = _cholesky_qr(q)
    if return_r:
        return q, r2 @ r1
    return q


def _as_matrix(op):
    """Accept a raw array/sparse matrix or anything exposing ``.matrix``."""
    return getattr(op, "matrix", op)


def sym_eig_smallest(op, m, maxiter=None, dense_max_dim=None):
    """Compute the ``m`` smallest eigenpairs of a symmetric operator.

    Dense symmetric solve for dimension <= ``dense_max_dim`` (default
    DENSE_EIG_MAX_DIM), otherwise shift-invert Lanczos (ARPACK) around zero,
    which targets the smallest eigenvalues of a positive definite operator.

    Returns an :class:`EigDecomposition` with ascending eigenvalues and
    orthonormal eigenvectors.
    """
    a = _as_matrix(op)
    n = a.shape[0]
    if m >= n:
        raise ValueError("sym_eig_smallest: need m < dimension")
    if dense_max_dim is None:
        dense_max_dim = DENSE_EIG_MAX_DIM
    if n <= dense_max_dim:
        dense = a.toarray() if sp.issparse(a) else np.asarray(a, dtype=float)
        values, vectors = scipy.linalg.eigh(dense, subset_by_index=[0, m - 1])
    else:
        try:
            values, vectors = spla.eigsh(
                a.tocsc() if sp.issparse(a) else a,
                k=m,
                sigma=0.0,
                which="LM",
                maxiter=maxiter,
            )
        except spla.ArpackNoConvergence as exc:
            raise ConvergenceFailure(str(exc)) from exc
    order = np.argsort(values)
    return EigDecomposition(values=values[order], vectors=vectors[:, order])


def sym_eig_largest(op, m, maxiter=None, dense_max_dim=None):
    """Largest ``m`` eigenpairs of a symmetric operator, ascending order."""
    a = _as_matrix(op)
    n = a.shape[0]
    if m >= n:
        raise ValueError("sym_eig_largest: need m < dimension")
    if dense_max_dim is None:
        dense_max_dim = DENSE_EIG_MAX_DIM
    if n <= dense_max_dim:
        dense = a.toarray() if sp.issparse(a) else np.asarray(a, dtype=float)
        values, vectors = scipy.linalg.eigh(dense, subset_by_index=[n - m, n - 1])
    else:
        try:
            values, vectors = spla.eigsh(a, k=m, which="LA", maxiter=maxiter)
        except spla.ArpackNoConvergence as exc:
            raise ConvergenceFailure(str(exc)) from exc
    order = np.argsort(values)
    return EigDecomposition(values=values[order], vectors=vectors[:, order])


def spectral_abscissa(a):
    """Largest real part of the eigenvalues of a dense square matrix."""
    return float(np.linalg.eigvals(np.asarray(a, dtype=float)).real.max())


def solve_lyapunov(a, q):
    """Solve ``a x + x a^T + q = 0`` for stable ``a`` (Schur/Bartels-Stewart).

    Parameters
    ----------
    a : (n, n) array whose eigenvalues all have negative real part.
    q : (n, n) symmetric positive semidefinite array.

    Returns
    -------
    x : (n, n) symmetric array.

    Raises
    ------
    UnstableSystem
        If the spectral abscissa of ``a`` is >= 0.
    """
    a = np.asarray(a, dtype=float)
    q = np.asarray(q, dtype=float)
    if spectral_abscissa(a) >= 0.0:
        raise UnstableSystem("solve_lyapunov: spectral abscissa >= 0")
    x = scipy.linalg.solve_continuous_lyapunov(a, -q)
    return 0.5 * (x + x.T)


def rk4_integrate(f, y0, t0, t1, steps):
    """Integrate ``dy/dt = f(t, y)`` with the classical 4th-order scheme.

    Returns the trajectory as an array of shape ``(steps + 1,) + y0.shape``
    including the initial state.

    Raises
    ------
    NonFiniteState
        If any component of the state becomes NaN or infinite.
    """
    if steps < 1:
        raise ValueError("rk4_integrate: steps must be >= 1")
    y = np.array(y0, dtype=float)
    h = (t1 - t0) / steps
    out = np.empty((steps + 1,) + y.shape)
    out[0] = y
    t = t0
    for i in range(steps):
        k1 = f(t, y)
        k2 = f(t + 0.5 * h, y + 0.5 * h * k1)
        k3 = f(t + 0.5 * h, y + 0.5 * h * k2)
        k4 = f(t + h, y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise NonFiniteState(f"rk4_integrate: non-finite state at step {i + 1}")
        out[i + 1] = y
        t = t0 + (i + 1) * h
    return out
