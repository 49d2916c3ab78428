"""Numerical consumers that measure how good a predicted subspace is:
deflated conjugate gradients, two-grid correction with spectral-radius
measurement, Galerkin POD reduced models, and balanced-truncation LQR.
"""

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    CflViolation,
    MaxIterations,
    NonFiniteState,
    RankDeficient,
    SingularCoarseMatrix,
    UnstableSystem,
)
from .numerics import solve_lyapunov, spectral_abscissa, sym_eig_smallest
from .problems import FieldSample, GridSpec, SnapshotMatrix, _advection_term, assemble_elliptic


@dataclass
class SolverReport:
    """Convergence record of one iterative solve."""

    iterations: int
    residuals: list  # relative 2-norm per iteration, starting at iteration 0
    converged: bool
    wall_time: float


@dataclass
class RomBasis:
    """Orthonormal reduced basis and where it came from."""

    basis: np.ndarray
    source: str  # local-pod | global-pod | predicted | oracle
    singular_values: np.ndarray = None


@dataclass
class BalancedReduction:
    """Balancing projection, its left inverse, and the Hankel values."""

    projection: np.ndarray  # (n, r)
    left_inverse: np.ndarray  # (r, n)
    hankel: np.ndarray  # descending, full length


def _matrix(op):
    return getattr(op, "matrix", op)


def _empty_basis(v):
    return v is None or (hasattr(v, "shape") and v.shape[1] == 0)


def _coarse_factor(a, v):
    e = v.T @ (a @ v)
    try:
        return scipy.linalg.cho_factor(0.5 * (e + e.T))
    except scipy.linalg.LinAlgError as exc:
        raise SingularCoarseMatrix("coarse matrix V^T A V is not positive definite") from exc


def cg(a, b, tol=1e-8, maxit=None):
    """Conjugate gradients for SPD ``a`` down to a relative residual ``tol``."""
    a = _matrix(a)
    b = np.asarray(b, dtype=float)
    n = b.size
    if maxit is None:
        maxit = 10 * n
    start = time.perf_counter()
    b_norm = np.linalg.norm(b)
    if b_norm == 0.0:
        return np.zeros(n), SolverReport(0, [], True, time.perf_counter() - start)
    x = np.zeros(n)
    r = b.copy()
    p = r.copy()
    rr = r @ r
    residuals = [1.0]
    it = 0
    while np.sqrt(rr) / b_norm > tol:
        if it >= maxit:
            raise MaxIterations(f"cg: no convergence in {maxit} iterations")
        ap = a @ p
        alpha = rr / (p @ ap)
        x += alpha * p
        r -= alpha * ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
        it += 1
        residuals.append(float(np.sqrt(rr) / b_norm))
    return x, SolverReport(it, residuals, True, time.perf_counter() - start)


def deflated_cg(a, b, v, tol=1e-8, maxit=None):
    """CG with an initial coarse solve over ``span(v)`` and directions kept
    A-orthogonal to it, so residuals stay orthogonal to the deflation space.
    """
    if _empty_basis(v):
        return cg(a, b, tol=tol, maxit=maxit)
    a = _matrix(a)
    b = np.asarray(b, dtype=float)
    v = np.asarray(v, dtype=float)
    n = b.size
    if maxit is None:
        maxit = 10 * n
    start = time.perf_counter()
    e = _coarse_factor(a, v)
    av = a @ v

    def coarse_project(r):
        """A-orthogonalize against span(v): r - V (V^T A V)^{-1} (A V)^T ... """
        return v @ scipy.linalg.cho_solve(e, av.T @ r)

    b_norm = np.linalg.norm(b)
    if b_norm == 0.0:
        return np.zeros(n), SolverReport(0, [], True, time.perf_counter() - start)
    x = v @ scipy.linalg.cho_solve(e, v.T @ b)
    r = b - a @ x
    residuals = [float(np.linalg.norm(r) / b_norm)]
    it = 0
    if residuals[0] <= tol:
        return x, SolverReport(0, residuals, True, time.perf_counter() - start)
    p = r - coarse_project(r)
    rr = r @ r
    while True:
        if it >= maxit:
            raise MaxIterations(f"deflated_cg: no convergence in {maxit} iterations")
        ap = a @ p
        alpha = rr / (p @ ap)
        x += alpha * p
        r -= alpha * ap
        rr_new = r @ r
        it += 1
        rel = float(np.sqrt(rr_new) / b_norm)
        residuals.append(rel)
        if rel <= tol:
            return x, SolverReport(it, residuals, True, time.perf_counter() - start)
        p = r + (rr_new / rr) * p - coarse_project(r)
        rr = rr_new


def smallest_eigenspace(op, m):
    """Orthonormal basis of the eigenspace of the m smallest eigenvalues."""
    return sym_eig_smallest(op, m).vectors


def two_grid_apply(a, v, omega, b, x):
    """One two-grid sweep: damped-Jacobi smooth, coarse correction, smooth."""
    a = _matrix(a)
    d = a.diagonal()
    if np.any(d == 0):
        raise ValueError("two_grid_apply: operator has zero diagonal entries")

    def smooth(y):
        return y + omega * (b - a @ y) / d

    x = smooth(np.asarray(x, dtype=float))
    if not _empty_basis(v):
        e = _coarse_factor(a, v)
        r = b - a @ x
        x = x + v @ scipy.linalg.cho_solve(e, v.T @ r)
    return smooth(x)


def two_grid_rho(a, v, omega, power_iters=200, seed=0, tol=1e-8):
    """Spectral radius of the two-grid error propagation operator.

    Power iteration on the diagonally symmetrized similarity of
    ``S (I - V (V^T A V)^{-1} V^T A) S`` with ``S = I - omega D^{-1} A``,
    using the Rayleigh quotient as the estimate.  Deterministic for a fixed
    seed of the start vector.
    """
    a = _matrix(a)
    n = a.shape[0]
    d = a.diagonal()
    dsq = np.sqrt(d)
    a_hat = sp.diags(1.0 / dsq) @ a @ sp.diags(1.0 / dsq)

    if _empty_basis(v):
        coarse = None
    else:
        v = np.asarray(v, dtype=float)
        e = _coarse_factor(a, v)
        vhat = v * dsq[:, None]
        vhat_t_ahat = (a @ v / dsq[:, None]).T  # = V^T A D^{-1/2}
        coarse = (e, vhat, vhat_t_ahat)

    def apply_t(x):
        y = x - omega * (a_hat @ x)
        if coarse is not None:
            e_, vh, vta = coarse
            y = y - vh @ scipy.linalg.cho_solve(e_, vta @ y)
        return y - omega * (a_hat @ y)

    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    x /= np.linalg.norm(x)
    estimate = 0.0
    for it in range(power_iters):
        y = apply_t(x)
        new_estimate = float(abs(x @ y))
        norm_y = np.linalg.norm(y)
        if norm_y == 0.0:
            return 0.0
        x = y / norm_y
        if it >= 50 and abs(new_estimate - estimate) <= tol * abs(new_estimate):
            return new_estimate
        estimate = new_estimate
    return estimate


def pod_basis(snapshots, m, source="local-pod"):
    """Top-``m`` left singular vectors of the weighted snapshot matrix.

    The squared snapshot reconstruction error equals the discarded
    singular-value energy.
    """
    weighted = snapshots.values * np.sqrt(snapshots.weights)[None, :]
    u, s, _ = np.linalg.svd(weighted, full_matrices=False)
    cutoff = s[0] * max(weighted.shape) * np.finfo(float).eps if s.size and s[0] > 0 else 0.0
    rank = int(np.sum(s > cutoff))
    if m > rank:
        raise RankDeficient(f"pod_basis: requested {m} modes, numerical rank {rank}")
    return RomBasis(basis=u[:, :m], source=source, singular_values=s)


def pod_rom_integrate(nu, u0, basis, nt=64, t_final=0.1):
    """Galerkin-reduced Burgers integration with the same one-step scheme
    as the full model: lift, evaluate the full right-hand side, project."""
    phi = basis.basis if isinstance(basis, RomBasis) else np.asarray(basis, dtype=float)
    nu_vals = np.asarray(nu.values if isinstance(nu, FieldSample) else nu, dtype=float)
    u_init = np.asarray(u0.values if isinstance(u0, FieldSample) else u0, dtype=float)
    nx = nu_vals.size
    grid = GridSpec(extents=(nx,))
    h = grid.spacing(0)
    dt = t_final / nt
    diff = assemble_elliptic([FieldSample(grid=grid, values=nu_vals)], grid)
    m_full = (sp.eye(nx) + dt * diff.matrix).tocsc()
    m_reduced = phi.T @ (m_full @ phi)
    factor = scipy.linalg.cho_factor(0.5 * (m_reduced + m_reduced.T))
    a_coeff = phi.T @ u_init
    snapshots = np.empty((nx, nt))
    for step in range(nt):
        u = phi @ a_coeff
        if np.max(np.abs(u)) * dt / h > 1.0:
            raise CflViolation(f"pod_rom_integrate: CFL violated at step {step}")
        rhs = phi.T @ (u - dt * _advection_term(u, h))
        a_coeff = scipy.linalg.cho_solve(factor, rhs)
        snapshots[:, step] = phi @ a_coeff
    return SnapshotMatrix(values=snapshots, weights=np.full(nt, dt))


def _psd_factor(w):
    """Low-rank factor L with w = L L^T, small negative ripple clipped."""
    vals, vecs = scipy.linalg.eigh(0.5 * (w + w.T))
    vals = np.clip(vals, 0.0, None)
    keep = vals > (vals.max() * 1e-15 if vals.size else 0.0)
    return vecs[:, keep] * np.sqrt(vals[keep])


def balanced_truncation(a, b, c, r):
    """Square-root balanced truncation of a stable LTI system (a, b, c).

    Returns the rank-``r`` balancing projection, its left inverse, and all
    Hankel singular values in descending order.  In the balanced coordinates
    both Gramians equal ``diag(hankel)``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float)
    if b.ndim == 1:
        b = b[:, None]
    if c.ndim == 1:
        c = c[None, :]
    if spectral_abscissa(a) >= 0.0:
        raise UnstableSystem("balanced_truncation: system matrix is not stable")
    wc = solve_lyapunov(a, b @ b.T)
    wo = solve_lyapunov(a.T, c.T @ c)
    lc = _psd_factor(wc)
    lo = _psd_factor(wo)
    u, s, vt = np.linalg.svd(lo.T @ lc, full_matrices=False)
    if r > s.size or s[r - 1] <= s[0] * 1e-13:
        raise RankDeficient(f"balanced_truncation: rank {r} exceeds the numerical rank")
    scale = 1.0 / np.sqrt(s[:r])
    projection = lc @ vt[:r].T * scale
    left_inverse = (u[:, :r] * scale).T @ lo.T
    return BalancedReduction(projection=projection, left_inverse=left_inverse, hankel=s)


def lqr_min_steps(system, t_final, lam, safety=2.5):
    """Step count keeping explicit RK4 stable for the LQR integrations.

    Combines the Gershgorin bound on the heat operator with the stiffness
    of the quadratic Riccati term, whose local rate is bounded by
    ``2 ||W||^2 ||Psi Psi^T|| / lam`` (the value-function block never
    exceeds its terminal norm for a stable system).
    """
    a = np.asarray(system.a, dtype=float)
    gersh = float(np.max(np.sum(np.abs(a), axis=1)))
    qf_norm = float(np.linalg.norm(system.psi, 2) ** 2) if system.psi.size else 0.0
    w_norm = float(np.linalg.norm(system.w, 2) ** 2) if system.w.size else 0.0
    bound = gersh + 2.0 * w_norm * qf_norm / lam
    return max(int(np.ceil(t_final * bound / safety)), 8)


@dataclass
class LqrResult:
    """Finite-horizon LQR run: control/state trajectories and error metrics."""

    times: np.ndarray
    control: np.ndarray  # (nt + 1, m)
    states: np.ndarray  # (nt + 1, n), lifted to full space when reduced
    cost: float
    cost_uncontrolled: float
    e_state: float = None  # relative state error at T vs full-order reference
    e_obs: float = None  # relative observation error at T

    @property
    def terminal_state(self):
        return self.states[-1]


def _riccati_backward(a, b_vec, w, qf, lam, t_final, n_half_steps):
    """March the value-function blocks backward, storing every half step.

    Returns arrays indexed by forward half-grid time: index j holds the
    quadratic block P and linear block q at time ``j * dt/2``.
    """
    n = a.shape[0]
    at = a.T
    dt = t_final / n_half_steps

    def rate(p, q):
        pw = p @ w
        dp = -(p @ a + at @ p - (pw @ pw.T) / lam)
        dq = -(at @ q) + p @ b_vec + pw @ (w.T @ q) / lam
        # backward march in tau = T - t flips the sign of the t-derivative
        return -dp, -dq

    p = qf.copy()
    q = np.zeros(n)
    ps = np.empty((n_half_steps + 1, n, n))
    qs = np.empty((n_half_steps + 1, n))
    ps[n_half_steps] = p
    qs[n_half_steps] = q
    for j in range(n_half_steps):
        k1p, k1q = rate(p, q)
        k2p, k2q = rate(p + 0.5 * dt * k1p, q + 0.5 * dt * k1q)
        k3p, k3q = rate(p + 0.5 * dt * k2p, q + 0.5 * dt * k2q)
        k4p, k4q = rate(p + dt * k3p, q + dt * k3q)
        p = p + (dt / 6.0) * (k1p + 2 * k2p + 2 * k3p + k4p)
        q = q + (dt / 6.0) * (k1q + 2 * k2q + 2 * k3q + k4q)
        p = 0.5 * (p + p.T)
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
            raise NonFiniteState("lqr: Riccati integration diverged")
        ps[n_half_steps - 1 - j] = p
        qs[n_half_steps - 1 - j] = q
    return ps, qs


def _forward_controlled(a, b_vec, w, ps, qs, lam, phi0, t_final, nt):
    """Integrate the controlled state forward with gains on the half grid."""
    dt = t_final / nt
    phi = phi0.copy()
    n = phi0.size
    states = np.empty((nt + 1, n))
    controls = np.empty((nt + 1, w.shape[1]))
    states[0] = phi

    def control(j_half, y):
        return -(w.T @ (ps[j_half] @ y + qs[j_half])) / lam

    def rhs(j_half, y):
        return a @ y - b_vec + w @ control(j_half, y)

    for k in range(nt):
        j = 2 * k
        controls[k] = control(j, phi)
        k1 = rhs(j, phi)
        k2 = rhs(j + 1, phi + 0.5 * dt * k1)
        k3 = rhs(j + 1, phi + 0.5 * dt * k2)
        k4 = rhs(j + 2, phi + dt * k3)
        phi = phi + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(phi)):
            raise NonFiniteState("lqr: controlled state diverged")
        states[k + 1] = phi
    controls[nt] = control(2 * nt, phi)
    return states, controls


def _forward_free(a, b_vec, phi0, t_final, nt):
    dt = t_final / nt
    phi = phi0.copy()
    states = np.empty((nt + 1, phi0.size))
    states[0] = phi

    def rhs(y):
        return a @ y - b_vec

    for k in range(nt):
        k1 = rhs(phi)
        k2 = rhs(phi + 0.5 * dt * k1)
        k3 = rhs(phi + 0.5 * dt * k2)
        k4 = rhs(phi + dt * k3)
        phi = phi + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        states[k + 1] = phi
    return states


def _quad_cost(psi, states, controls, lam, dt):
    terminal = 0.5 * float(np.linalg.norm(psi.T @ states[-1]) ** 2)
    u_sq = np.sum(controls**2, axis=1)
    running = 0.5 * lam * float(np.trapezoid(u_sq, dx=dt))
    return terminal + running


def lqr_solve(system, lam, t_final, nt, basis=None):
    """Finite-horizon LQR for the forced heat system.

    The value-function blocks are integrated backward with RK4 and the
    optimal feedback is applied forward.  When ``basis`` is given the whole
    pipeline runs in the reduced coordinates (basis columns plus the
    constant-forcing coordinate) and the lifted trajectory is compared
    against the full-order controlled reference at the final time.
    """
    if lam <= 0:
        raise ValueError("lqr_solve: lam must be positive")
    a, b_vec, w, psi, phi0 = system.a, system.b, system.w, system.psi, system.phi0
    dt = t_final / nt

    def run(a_, b_, w_, qf_, phi0_):
        ps, qs = _riccati_backward(a_, b_, w_, qf_, lam, t_final, 2 * nt)
        return _forward_controlled(a_, b_, w_, ps, qs, lam, phi0_, t_final, nt)

    states_full, controls_full = run(a, b_vec, w, psi @ psi.T, phi0)
    free_states = _forward_free(a, b_vec, phi0, t_final, nt)
    cost_full = _quad_cost(psi, states_full, controls_full, lam, dt)
    cost_free = _quad_cost(psi, free_states, np.zeros_like(controls_full), lam, dt)
    times = np.linspace(0.0, t_final, nt + 1)

    if basis is None:
        return LqrResult(
            times=times,
            control=controls_full,
            states=states_full,
            cost=cost_full,
            cost_uncontrolled=cost_free,
        )

    phi = basis.basis if isinstance(basis, RomBasis) else np.asarray(basis, dtype=float)
    a_r = phi.T @ a @ phi
    b_r = phi.T @ b_vec
    w_r = phi.T @ w
    psi_r = phi.T @ psi
    states_r, controls_r = run(a_r, b_r, w_r, psi_r @ psi_r.T, phi.T @ phi0)
    lifted = states_r @ phi.T
    cost_red = _quad_cost(psi, lifted, controls_r, lam, dt)
    ref = states_full[-1]
    e_state = float(np.linalg.norm(lifted[-1] - ref) / np.linalg.norm(ref))
    obs_ref = psi.T @ ref
    obs_norm = np.linalg.norm(obs_ref)
    e_obs = float(np.linalg.norm(psi.T @ lifted[-1] - obs_ref) / obs_norm) if obs_norm > 0 else None
    return LqrResult(
        times=times,
        control=controls_r,
        states=lifted,
        cost=cost_red,
        cost_uncontrolled=cost_free,
        e_state=e_state,
        e_obs=e_obs,
    )
