"""Discretized operators, PDE integrators, dataset generators, and the
on-disk dataset container.

Operators are assembled as symmetric positive definite matrices for
``-div k grad`` with homogeneous Dirichlet conditions on grids of interior
nodes; datasets pair sampled input fields with orthonormal target bases.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    CflViolation,
    CorruptHeader,
    FormatVersionMismatch,
    NonPositiveCoefficient,
    TruncatedPayload,
)
from .fields import (
    GRF_PRESETS,
    FieldSample,
    GridSpec,
    contrast_field,
    grf_sample_normalized,
    morse_potential_1d,
    morse_potential_2d,
    sample_morse_params_1d,
    sample_morse_params_2d,
    shifted_tanh_field,
)
from .numerics import cholesky_qr2, sym_eig_largest, sym_eig_smallest

DATASET_MAGIC = "subreg-dataset"
DATASET_VERSION = 1

PRESET_NAMES = (
    "elliptic2d-iso",
    "elliptic2d-aniso",
    "elliptic3d",
    "qm1d",
    "qm2d",
    "burgers",
    "twogrid",
    "control",
)

# Default (reduced) grid extents per preset; experiment configs may override.
DEFAULT_GRIDS = {
    "elliptic2d-iso": (16, 16),
    "elliptic2d-aniso": (16, 16),
    "elliptic3d": (10, 10, 10),
    "qm1d": (100,),
    "qm2d": (32, 32),
    "burgers": (128,),
    "twogrid": (32, 32),
    "control": (64,),
}

DEFAULT_BOUNDS = {
    "qm1d": ((0.0, 10.0),),
    "qm2d": ((-7.0, 7.0), (-7.0, 7.0)),
}


@dataclass
class SparseOperator:
    """Sparse symmetric stencil operator with Dirichlet boundary built in."""

    matrix: sp.csr_matrix
    symmetric: bool = True

    @property
    def dimension(self):
        return self.matrix.shape[0]

    def matvec(self, x):
        return self.matrix @ x

    def diagonal(self):
        return self.matrix.diagonal()

    def toarray(self):
        return self.matrix.toarray()


@dataclass
class SubspaceDataset:
    """Sampled input fields paired with orthonormal target bases."""

    grid: GridSpec
    features: np.ndarray  # (n_samples, n_channels, *extents)
    targets: np.ndarray  # (n_samples, n_nodes, target_dim)
    meta: dict = field(default_factory=dict)

    @property
    def n_samples(self):
        return self.features.shape[0]

    @property
    def n_channels(self):
        return self.features.shape[1]

    @property
    def target_dim(self):
        return self.targets.shape[2]

    def feature_fields(self, i):
        return [FieldSample(grid=self.grid, values=ch) for ch in self.features[i]]


@dataclass
class SnapshotMatrix:
    """Solution snapshots, one column per time level, with quadrature weights."""

    values: np.ndarray  # (space_dim, n_snapshots)
    weights: np.ndarray  # (n_snapshots,)

    def __post_init__(self):
        if np.any(self.weights <= 0):
            raise ValueError("SnapshotMatrix weights must be positive")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("SnapshotMatrix values must be finite")


def _axis_slice(ndim, axis, sl):
    out = [slice(None)] * ndim
    out[axis] = sl
    return tuple(out)


def assemble_elliptic(k_fields, grid):
    """Finite-difference operator for ``-div k grad`` with Dirichlet boundary.

    ``k_fields`` holds one channel (isotropic) or one per axis (anisotropic);
    face coefficients are arithmetic means of the adjacent nodes, with the
    single adjacent interior value used on boundary faces.  The result is
    symmetric positive definite.
    """
    if isinstance(k_fields, FieldSample):
        k_fields = [k_fields]
    ndim = grid.ndim
    if len(k_fields) == 1:
        channels = [np.asarray(k_fields[0].values, dtype=float)] * ndim
    elif len(k_fields) == ndim:
        channels = [np.asarray(f.values, dtype=float) for f in k_fields]
    else:
        raise ValueError("assemble_elliptic: channel count must be 1 or ndim")
    for ch in channels:
        if np.any(ch <= 0):
            raise NonPositiveCoefficient("assemble_elliptic: coefficient <= 0")

    n = grid.n_nodes
    idx = np.arange(n).reshape(grid.extents)
    diag = np.zeros(grid.extents)
    rows, cols, vals = [], [], []
    for axis in range(ndim):
        h2 = grid.spacing(axis) ** 2
        k = channels[axis]
        lo = k[_axis_slice(ndim, axis, slice(None, -1))]
        hi = k[_axis_slice(ndim, axis, slice(1, None))]
        kf = 0.5 * (lo + hi) / h2
        diag[_axis_slice(ndim, axis, slice(None, -1))] += kf
        diag[_axis_slice(ndim, axis, slice(1, None))] += kf
        diag[_axis_slice(ndim, axis, slice(0, 1))] += (
            k[_axis_slice(ndim, axis, slice(0, 1))] / h2
        )
        diag[_axis_slice(ndim, axis, slice(-1, None))] += (
            k[_axis_slice(ndim, axis, slice(-1, None))] / h2
        )
        r = idx[_axis_slice(ndim, axis, slice(None, -1))].ravel()
        c = idx[_axis_slice(ndim, axis, slice(1, None))].ravel()
        v = -kf.ravel()
        rows.extend([r, c])
        cols.extend([c, r])
        vals.extend([v, v])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    matrix = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    matrix += sp.diags(diag.ravel())
    return SparseOperator(matrix=matrix.tocsr(), symmetric=True)


def assemble_schrodinger(u_field, grid):
    """FD Laplacian plus a diagonal potential: ``-Delta + U``."""
    ones = FieldSample(grid=grid, values=np.ones(grid.extents))
    lap = assemble_elliptic([ones], grid)
    matrix = lap.matrix + sp.diags(np.asarray(u_field.values, dtype=float).ravel())
    return SparseOperator(matrix=matrix.tocsr(), symmetric=True)


def twogrid_coefficient_field(grid, rng, n_modes=100, lam1=0.1, lam2=1.0, alpha=1.0, beta=50.0):
    """Coefficient field built from weighted complex exponentials.

    Standard-normal coefficients on an ``n_modes x n_modes`` index set are
    damped by ``(1 + lam1 |k|^2)^-1``, the real part is squashed with tanh,
    and the result is mapped affinely onto ``[alpha, beta]``.
    """
    if grid.ndim != 2:
        raise ValueError("twogrid_coefficient_field: grid must be 2D")
    c = rng.standard_normal((n_modes, n_modes))
    k1 = np.arange(n_modes)
    k2 = np.arange(n_modes)
    weights = 1.0 / (1.0 + lam1 * (k1[:, None] ** 2 + k2[None, :] ** 2))
    x = grid.axis_coords(0)
    y = grid.axis_coords(1)
    ex = np.exp(1j * np.outer(x, k1))
    ey = np.exp(1j * np.outer(y, k2))
    s0 = (ex @ (c * weights) @ ey.T).real
    s = np.tanh(lam2 * s0)
    vals = alpha + (beta - alpha) * (s + 1.0) / 2.0
    return FieldSample(grid=grid, values=vals)


def smoother_leading_eigenspace(op, omega, m):
    """Orthonormal basis of the leading eigenspace of ``I - omega D^-1 A``.

    Computed through the symmetric similarity ``D^-1/2 A D^-1/2``, whose
    eigenvalues ``mu`` map to smoother eigenvalues ``1 - omega mu``; both
    spectral ends are candidates and the ``m`` largest ``|1 - omega mu|``
    win.  For damped sweeps (omega well below 1) that is the low end, for
    omega = 1 the two ends mix.
    """
    a = op.matrix
    d = a.diagonal()
    dinv_sqrt = 1.0 / np.sqrt(d)
    a_hat = sp.diags(dinv_sqrt) @ a @ sp.diags(dinv_sqrt)
    a_hat = (0.5 * (a_hat + a_hat.T)).tocsr()
    low = sym_eig_smallest(a_hat, m)
    high = sym_eig_largest(a_hat, m)
    values = np.concatenate([low.values, high.values])
    vectors = np.hstack([low.vectors, high.vectors])
    top = np.argsort(-np.abs(1.0 - omega * values), kind="stable")[:m]
    return cholesky_qr2(dinv_sqrt[:, None] * vectors[:, top])


def _eig_targets(op, m):
    eig = sym_eig_smallest(op, m)
    return eig.vectors


def _grid_for(preset, extents=None, bounds=None):
    extents = tuple(extents) if extents is not None else DEFAULT_GRIDS[preset]
    if bounds is None:
        bounds = DEFAULT_BOUNDS.get(preset)
    return GridSpec(extents=extents, bounds=bounds)


def _sample_rngs(seed, n_samples):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_samples)]


def operator_from_sample(dataset, i):
    """Reassemble the sample's discrete operator from its stored fields."""
    preset = dataset.meta["preset"]
    grid = dataset.grid
    fields_i = dataset.feature_fields(i)
    if preset in ("elliptic2d-iso", "elliptic3d", "twogrid"):
        return assemble_elliptic([fields_i[0]], grid)
    if preset == "elliptic2d-aniso":
        return assemble_elliptic(fields_i[:2], grid)
    if preset in ("qm1d", "qm2d"):
        return assemble_schrodinger(fields_i[0], grid)
    raise ValueError(f"operator_from_sample: no operator for preset {preset!r}")


def gen_eig_dataset(preset, n_samples, m_target, seed, grid_extents=None):
    """Dataset of input fields and the ``m_target`` smallest eigenvectors.

    Presets: elliptic2d-iso, elliptic2d-aniso, elliptic3d, qm1d, qm2d.
    Deterministic given the seed; per-sample RNG streams are spawned from it.
    """
    if preset not in ("elliptic2d-iso", "elliptic2d-aniso", "elliptic3d", "qm1d", "qm2d"):
        raise ValueError(f"gen_eig_dataset: unknown preset {preset!r}")
    grid = _grid_for(preset, grid_extents)
    rngs = _sample_rngs(seed, n_samples)
    feats, targs = [], []
    for rng in rngs:
        if preset == "elliptic2d-iso":
            k = contrast_field(grid, "elliptic2d", rng)
            channels = [k]
            op = assemble_elliptic([k], grid)
        elif preset == "elliptic2d-aniso":
            k1 = contrast_field(grid, "elliptic2d", rng)
            k2 = contrast_field(grid, "elliptic2d", rng)
            channels = [k1, k2]
            op = assemble_elliptic([k1, k2], grid)
        elif preset == "elliptic3d":
            k = contrast_field(grid, "elliptic3d", rng)
            channels = [k]
            op = assemble_elliptic([k], grid)
        elif preset == "qm1d":
            pot = morse_potential_1d(sample_morse_params_1d(rng), grid)
            channels = [pot]
            op = assemble_schrodinger(pot, grid)
        else:  # qm2d
            pa = sample_morse_params_2d(rng)
            pb = sample_morse_params_2d(rng)
            theta = rng.uniform(0.0, 2.0 * np.pi)
            pot = morse_potential_2d(pa, pb, (math.cos(theta), math.sin(theta)), grid)
            channels = [pot]
            op = assemble_schrodinger(pot, grid)
        feats.append(np.stack([ch.values for ch in channels]))
        targs.append(_eig_targets(op, m_target))
    meta = {"preset": preset, "seed": int(seed), "target_dim": int(m_target)}
    return SubspaceDataset(
        grid=grid,
        features=np.stack(feats),
        targets=np.stack(targs),
        meta=meta,
    )


def gen_twogrid_dataset(n_samples, m_target, seed, grid_extents=None, omega=0.9):
    """Coefficient fields paired with damped-Jacobi leading eigenspaces."""
    grid = _grid_for("twogrid", grid_extents)
    rngs = _sample_rngs(seed, n_samples)
    feats, targs = [], []
    for rng in rngs:
        k = twogrid_coefficient_field(grid, rng)
        op = assemble_elliptic([k], grid)
        feats.append(k.values[None])
        targs.append(smoother_leading_eigenspace(op, omega, m_target))
    meta = {"preset": "twogrid", "seed": int(seed), "target_dim": int(m_target), "omega": omega}
    return SubspaceDataset(grid=grid, features=np.stack(feats), targets=np.stack(targs), meta=meta)


def gen_elliptic_rhs_pairs(dataset, n_rhs, seed):
    """Right-hand sides with known solutions in the span of the targets.

    ``u = Phi z`` with standard-normal ``z`` over the first 10 target
    eigenvectors and ``f = A u``, so ``A u = f`` holds to machine precision.
    Returns arrays of shape (n_samples, n_rhs, n_nodes).
    """
    if dataset.target_dim < 10:
        raise ValueError("gen_elliptic_rhs_pairs: need >= 10 eigenvectors per sample")
    rngs = _sample_rngs(seed, dataset.n_samples)
    us = np.empty((dataset.n_samples, n_rhs, dataset.targets.shape[1]))
    fs = np.empty_like(us)
    for i, rng in enumerate(rngs):
        phi = dataset.targets[i][:, :10]
        a = operator_from_sample(dataset, i).matrix
        z = rng.standard_normal((10, n_rhs))
        u = phi @ z
        us[i] = u.T
        fs[i] = (a @ u).T
    return fs, us


def _advection_term(u, h):
    """Centered conservative divergence of the flux ``u^2 / 2``."""
    f = 0.5 * u * u
    df = np.empty_like(u)
    df[1:-1] = (f[2:] - f[:-2]) / (2.0 * h)
    df[0] = f[1] / (2.0 * h)  # flux vanishes at the Dirichlet boundary
    df[-1] = -f[-2] / (2.0 * h)
    return df


def burgers_integrate(nu, u0, nx=128, nt=64, t_final=0.1):
    """Viscous Burgers on (0, 1) with a semi-implicit one-step scheme.

    Diffusion is treated implicitly through the SPD operator for
    ``-d/dx (nu d/dx)``; advection explicitly in conservative form.  Raises
    :class:`CflViolation` when ``max|u| dt / dx`` exceeds 1.  Returns the
    ``nt`` computed time levels as a :class:`SnapshotMatrix` with uniform
    weights ``dt``.
    """
    grid = GridSpec(extents=(nx,))
    nu_vals = np.asarray(nu.values if isinstance(nu, FieldSample) else nu, dtype=float)
    u = np.asarray(u0.values if isinstance(u0, FieldSample) else u0, dtype=float).copy()
    if np.any(nu_vals <= 0):
        raise NonPositiveCoefficient("burgers_integrate: viscosity must be positive")
    h = grid.spacing(0)
    dt = t_final / nt
    diff = assemble_elliptic([FieldSample(grid=grid, values=nu_vals)], grid)
    stepper = spla.splu((sp.eye(nx) + dt * diff.matrix).tocsc())
    snapshots = np.empty((nx, nt))
    for step in range(nt):
        if np.max(np.abs(u)) * dt / h > 1.0:
            raise CflViolation(f"burgers_integrate: CFL violated at step {step}")
        u = stepper.solve(u - dt * _advection_term(u, h))
        snapshots[:, step] = u
    return SnapshotMatrix(values=snapshots, weights=np.full(nt, dt))


def gen_burgers_dataset(n_samples, m_target, seed, nx=128, nt=64, t_final=0.1):
    """Viscosity/initial-condition pairs with local-POD target bases."""
    grid = GridSpec(extents=(nx,))
    rngs = _sample_rngs(seed, n_samples)
    feats, targs = [], []
    for rng in rngs:
        nu = shifted_tanh_field(grid, "burgers-nu", rng)
        u0 = grf_sample_normalized(
            grid, GRF_PRESETS["burgers-u0"]["gamma"], GRF_PRESETS["burgers-u0"]["r"], rng
        )
        snaps = burgers_integrate(nu, u0, nx=nx, nt=nt, t_final=t_final)
        weighted = snaps.values * np.sqrt(snaps.weights)[None, :]
        u_svd, _, _ = np.linalg.svd(weighted, full_matrices=False)
        feats.append(np.stack([nu.values, u0.values]))
        targs.append(u_svd[:, :m_target])
    meta = {
        "preset": "burgers",
        "seed": int(seed),
        "target_dim": int(m_target),
        "nt": int(nt),
        "t_final": float(t_final),
    }
    return SubspaceDataset(grid=grid, features=np.stack(feats), targets=np.stack(targs), meta=meta)


@dataclass
class HeatControlSystem:
    """Forced heat equation in augmented LTI form.

    The constant forcing is appended as extra state variables with zero
    dynamics, giving ``d/dt [phi; aux] = [[A, -I], [0, 0]] [phi; aux] + [W; 0] u``
    with ``aux(0) = b``.
    """

    a: np.ndarray  # (n, n), stable
    b: np.ndarray  # (n,)
    w: np.ndarray  # (n, m) orthonormal input shapes
    psi: np.ndarray  # (n, p) orthonormal observation shapes
    phi0: np.ndarray  # (n,)

    @property
    def n(self):
        return self.a.shape[0]

    @property
    def a_aug(self):
        n = self.n
        top = np.hstack([self.a, -np.eye(n)])
        bottom = np.zeros((n, 2 * n))
        return np.vstack([top, bottom])

    @property
    def x0_aug(self):
        return np.concatenate([self.phi0, self.b])


def heat_control_system(k_field, b, w, psi, phi0=None):
    """Assemble the forced heat system; ``A`` is minus the diffusion operator.

    ``w`` and ``psi`` are orthonormalized on entry.  With zero control the
    state relaxes to the steady solution of ``A phi = b``.
    """
    grid = k_field.grid
    op = assemble_elliptic([k_field], grid)
    a = -op.toarray()
    b_vals = np.asarray(b.values if isinstance(b, FieldSample) else b, dtype=float).ravel()
    w = np.asarray(w, dtype=float)
    psi = np.asarray(psi, dtype=float)
    w = cholesky_qr2(w) if w.size else w
    psi = cholesky_qr2(psi) if psi.size else psi
    if phi0 is None:
        phi0 = np.zeros(grid.n_nodes)
    phi0 = np.asarray(phi0.values if isinstance(phi0, FieldSample) else phi0, dtype=float).ravel()
    return HeatControlSystem(a=a, b=b_vals, w=w, psi=psi, phi0=phi0)


def gen_control_dataset(n_samples, m_target, seed, grid_extents=None, n_inputs=8, n_observations=8):
    """Heat-control samples with balanced-truncation target bases."""
    from .solvers import balanced_truncation  # deferred: solvers imports this module

    grid = _grid_for("control", grid_extents)
    rngs = _sample_rngs(seed, n_samples)
    n = grid.n_nodes
    feats, targs = [], []
    for rng in rngs:
        k = shifted_tanh_field(grid, "control-k", rng)
        b = grf_sample_normalized(grid, 5.0, 4.0, rng)
        phi0 = grf_sample_normalized(grid, 5.0, 4.0, rng)
        w = np.stack(
            [grf_sample_normalized(grid, 5.0, 4.0, rng).ravel() for _ in range(n_inputs)], axis=1
        )
        psi = np.stack(
            [grf_sample_normalized(grid, 5.0, 4.0, rng).ravel() for _ in range(n_observations)],
            axis=1,
        )
        system = heat_control_system(k, b, w, psi, phi0=phi0)
        reduction = balanced_truncation(system.a, system.w, system.psi.T, m_target)
        channels = [k.ravel(), b.ravel(), phi0.ravel()]
        channels += [system.w[:, j] for j in range(n_inputs)]
        channels += [system.psi[:, j] for j in range(n_observations)]
        feats.append(np.stack(channels).reshape(-1, *grid.extents))
        targs.append(cholesky_qr2(reduction.projection))
    meta = {
        "preset": "control",
        "seed": int(seed),
        "target_dim": int(m_target),
        "n_inputs": int(n_inputs),
        "n_observations": int(n_observations),
    }
    return SubspaceDataset(grid=grid, features=np.stack(feats), targets=np.stack(targs), meta=meta)


def control_system_from_sample(dataset, i):
    """Rebuild the :class:`HeatControlSystem` stored in a control dataset."""
    meta = dataset.meta
    grid = dataset.grid
    n_in = meta["n_inputs"]
    n_obs = meta["n_observations"]
    flat = dataset.features[i].reshape(dataset.n_channels, -1)
    k = FieldSample(grid=grid, values=flat[0])
    b = flat[1]
    phi0 = flat[2]
    w = flat[3 : 3 + n_in].T
    psi = flat[3 + n_in : 3 + n_in + n_obs].T
    return heat_control_system(k, b, w, psi, phi0=phi0)


def generate_dataset(preset, n_samples, m_target, seed, grid_extents=None, **kwargs):
    """Dispatch dataset generation by preset name."""
    if preset not in PRESET_NAMES:
        raise ValueError(f"generate_dataset: unknown preset {preset!r}")
    if preset == "burgers":
        nx = grid_extents[0] if grid_extents else DEFAULT_GRIDS["burgers"][0]
        return gen_burgers_dataset(n_samples, m_target, seed, nx=nx, **kwargs)
    if preset == "twogrid":
        return gen_twogrid_dataset(n_samples, m_target, seed, grid_extents=grid_extents, **kwargs)
    if preset == "control":
        return gen_control_dataset(n_samples, m_target, seed, grid_extents=grid_extents, **kwargs)
    return gen_eig_dataset(preset, n_samples, m_target, seed, grid_extents=grid_extents)


def write_dataset(dataset, path):
    """Write the dataset container: meta.json + raw little-endian float64."""
    import os

    os.makedirs(path, exist_ok=True)
    meta = {
        "magic": DATASET_MAGIC,
        "version": DATASET_VERSION,
        "grid": {
            "extents": list(dataset.grid.extents),
            "bounds": [list(b) for b in dataset.grid.bounds],
        },
        "features_shape": list(dataset.features.shape),
        "targets_shape": list(dataset.targets.shape),
        "meta": dataset.meta,
    }
    with open(os.path.join(path, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")
    dataset.features.astype("<f8").tofile(os.path.join(path, "features.f64"))
    dataset.targets.astype("<f8").tofile(os.path.join(path, "targets.f64"))
    return path


def _read_payload(path, shape):
    import os

    expected = int(np.prod(shape)) * 8
    actual = os.path.getsize(path)
    if actual < expected:
        raise TruncatedPayload(f"{path}: {actual} bytes, expected {expected}")
    if actual > expected:
        raise CorruptHeader(f"{path}: {actual} bytes exceed the declared {expected}")
    return np.fromfile(path, dtype="<f8").reshape(shape)


def read_dataset(path):
    """Read a dataset container written by :func:`write_dataset`."""
    import os

    meta_path = os.path.join(path, "meta.json")
    if not os.path.exists(meta_path):
        raise CorruptHeader(f"{meta_path}: missing header")
    try:
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptHeader(f"{meta_path}: {exc}") from exc
    if meta.get("magic") != DATASET_MAGIC:
        raise CorruptHeader(f"{meta_path}: bad magic {meta.get('magic')!r}")
    if meta.get("version") != DATASET_VERSION:
        raise FormatVersionMismatch(f"{meta_path}: version {meta.get('version')!r}")
    grid = GridSpec(
        extents=tuple(meta["grid"]["extents"]),
        bounds=tuple(tuple(b) for b in meta["grid"]["bounds"]),
    )
    features = _read_payload(os.path.join(path, "features.f64"), meta["features_shape"])
    targets = _read_payload(os.path.join(path, "targets.f64"), meta["targets_shape"])
    return SubspaceDataset(grid=grid, features=features, targets=targets, meta=meta["meta"])
