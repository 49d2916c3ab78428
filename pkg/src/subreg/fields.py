"""Random input generators: Gaussian fields, contrast maps, Morse potentials.

All samplers take an explicit ``numpy.random.Generator``; nothing touches
global RNG state.  Fields live on grids of interior nodes (Dirichlet
boundaries are implicit), matching the finite-difference operators that
consume them.
"""

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid of interior nodes on a 1-3 dimensional box."""

    extents: tuple
    bounds: tuple = None  # ((lo, hi), ...) per axis; defaults to (0, 1)

    def __post_init__(self):
        if not 1 <= len(self.extents) <= 3:
            raise ValueError("GridSpec supports 1 to 3 dimensions")
        if any(n < 2 for n in self.extents):
            raise ValueError("GridSpec extents must be >= 2")
        if self.bounds is None:
            object.__setattr__(self, "bounds", tuple((0.0, 1.0) for _ in self.extents))
        for lo, hi in self.bounds:
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise ValueError("GridSpec bounds must be finite with lo < hi")

    @property
    def ndim(self):
        return len(self.extents)

    @property
    def n_nodes(self):
        return int(np.prod(self.extents))

    def spacing(self, axis):
        lo, hi = self.bounds[axis]
        return (hi - lo) / (self.extents[axis] + 1)

    def axis_coords(self, axis):
        """Interior node coordinates along one axis."""
        lo, hi = self.bounds[axis]
        n = self.extents[axis]
        return lo + (hi - lo) * np.arange(1, n + 1) / (n + 1)

    def meshgrid(self):
        axes = [self.axis_coords(j) for j in range(self.ndim)]
        return np.meshgrid(*axes, indexing="ij")


@dataclass
class FieldSample:
    """Scalar field sampled at the interior nodes of a grid."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(self.grid.extents)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("FieldSample values must be finite")

    def ravel(self):
        return self.values.ravel()


def sine_basis(n):
    """Orthonormal discrete sine modes: column m is mode m+1 at n nodes."""
    i = np.arange(1, n + 1)
    return np.sqrt(2.0 / (n + 1)) * np.sin(np.pi * np.outer(i, i) / (n + 1))


def sine_synthesize(grid, coeff):
    """Field values from coefficients in the orthonormal sine basis."""
    values = np.asarray(coeff, dtype=float)
    for axis in range(grid.ndim):
        s = sine_basis(grid.extents[axis])
        values = np.moveaxis(np.tensordot(s, values, axes=(1, axis)), 0, axis)
    return values


def sine_analyze(grid, values):
    """Coefficients of a field in the orthonormal sine basis (inverse of
    :func:`sine_synthesize`; the basis matrices are orthogonal)."""
    coeff = np.asarray(values, dtype=float)
    for axis in range(grid.ndim):
        s = sine_basis(grid.extents[axis])
        coeff = np.moveaxis(np.tensordot(s.T, coeff, axes=(1, axis)), 0, axis)
    return coeff


def laplace_mode_eigenvalues(grid):
    """Continuous Dirichlet Laplacian eigenvalues per sine mode of the grid."""
    parts = []
    for axis in range(grid.ndim):
        lo, hi = grid.bounds[axis]
        m = np.arange(1, grid.extents[axis] + 1)
        parts.append((np.pi * m / (hi - lo)) ** 2)
    lam = parts[0]
    for p in parts[1:]:
        lam = lam[..., None] + p
    return lam


def continuous_mode_scale(grid):
    """Scale turning the discrete-orthonormal sine basis into the unit-L2
    continuous modes ``prod_j sqrt(2) sin(pi m_j x_j)`` (pointwise O(1))."""
    return math.sqrt(math.prod(n + 1 for n in grid.extents))


def grf_sample(grid, gamma, r, rng):
    """Gaussian random field with sine-mode amplitudes ``(1 + gamma lam)^-r``.

    Mode coefficients are independent standard normals scaled by the decaying
    weight, so larger ``r`` or ``gamma`` produce smoother fields.  Synthesis
    uses the continuous unit-L2 sine modes, keeping field magnitudes
    independent of the grid resolution.
    """
    if gamma < 0 or r <= 0:
        raise ValueError("grf_sample: need gamma >= 0 and r > 0")
    lam = laplace_mode_eigenvalues(grid)
    weights = (1.0 + gamma * lam) ** (-r)
    coeff = weights * rng.standard_normal(grid.extents)
    values = sine_synthesize(grid, coeff) * continuous_mode_scale(grid)
    return FieldSample(grid=grid, values=values)


def grf_mode_coefficients(grid, values):
    """Recover the mode coefficients of a field produced by :func:`grf_sample`."""
    return sine_analyze(grid, values) / continuous_mode_scale(grid)


def grf_sample_normalized(grid, gamma, r, rng):
    """Like :func:`grf_sample` but with the lowest mode scaled to unit
    amplitude, so field magnitudes stay O(1) across smoothness settings.

    Used by the dataset recipes whose nonlinear maps (tanh squashing,
    advection) need inputs of a sensible scale.
    """
    lam_min = float(laplace_mode_eigenvalues(grid).min())
    sample = grf_sample(grid, gamma, r, rng)
    sample.values *= (1.0 + gamma * lam_min) ** r
    return sample


def contrast_map(psi, alpha, beta, s):
    """Squash a field into (alpha, beta): ``alpha + (beta-alpha)(tanh(s psi)+1)/2``."""
    if not beta > alpha > 0:
        raise ValueError("contrast_map: need beta > alpha > 0")
    vals = alpha + (beta - alpha) * (np.tanh(s * psi.values) + 1.0) / 2.0
    return FieldSample(grid=psi.grid, values=vals)


@dataclass
class MorseParams:
    """Expanded Morse oscillator: well depth, equilibrium distance, and the
    two blended polynomial branches of the exponent profile."""

    depth: float
    r_eq: float
    q1_coeffs: np.ndarray  # ascending powers
    c1: float
    q2_coeffs: np.ndarray
    c2: float


def _blend_poly(x, coeffs, c):
    s = (x - 1.0) / (x + 1.0)
    return (1.0 - s) * np.polynomial.polynomial.polyval(x, coeffs) + c * s


def morse_profile(params, rvals):
    """Evaluate the radial Morse potential; zero at ``r_eq`` by construction."""
    x = np.asarray(rvals, dtype=float) / params.r_eq
    s = (x - 1.0) / (x + 1.0)
    p = np.where(
        x < 1.0,
        _blend_poly(x, params.q1_coeffs, params.c1),
        _blend_poly(x, params.q2_coeffs, params.c2),
    )
    return params.depth * (1.0 - np.exp(-s * p)) ** 2


def morse_potential_1d(params, grid):
    """Radial Morse potential sampled on a 1D grid."""
    if grid.ndim != 1:
        raise ValueError("morse_potential_1d: grid must be 1D")
    return FieldSample(grid=grid, values=morse_profile(params, grid.axis_coords(0)))


def morse_potential_2d(params_a, params_b, direction, grid):
    """Two radial Morse wells at mirrored centers ``+-sqrt(2) r_eq (u, v)``."""
    if grid.ndim != 2:
        raise ValueError("morse_potential_2d: grid must be 2D")
    u, v = direction
    norm = math.hypot(u, v)
    u, v = u / norm, v / norm
    c = math.sqrt(2.0) * params_a.r_eq
    xx, yy = grid.meshgrid()
    ra = np.sqrt((xx - c * u) ** 2 + (yy - c * v) ** 2)
    rb = np.sqrt((xx + c * u) ** 2 + (yy + c * v) ** 2)
    vals = morse_profile(params_a, ra) + morse_profile(params_b, rb)
    return FieldSample(grid=grid, values=vals)


def sample_morse_params_1d(rng):
    """Parameter draw for the 1D oscillator family (degree-10 branches)."""
    return MorseParams(
        depth=rng.uniform(10.0, 40.0),
        r_eq=rng.uniform(1.0, 8.0),
        q1_coeffs=rng.uniform(0.0, 5.0, size=11),
        c1=rng.uniform(0.0, 5.0),
        q2_coeffs=rng.uniform(0.0, 10.0, size=11),
        c2=rng.uniform(1.0, 11.0),
    )


def sample_morse_params_2d(rng):
    """Parameter draw for one well of the 2D pair (degree-2 branches)."""
    return MorseParams(
        depth=rng.uniform(10.0, 40.0),
        r_eq=rng.uniform(1.0, 5.0),
        q1_coeffs=rng.uniform(0.0, 3.0, size=3),
        c1=rng.uniform(10.0, 13.0),
        q2_coeffs=rng.uniform(0.0, 3.0, size=3),
        c2=rng.uniform(10.0, 13.0),
    )


# Named random-field recipes used by the dataset generators.  Each entry is a
# plain JSON-serializable dict so experiment configs can embed them verbatim.
GRF_PRESETS = {
    "elliptic2d": {"gamma": 1.0 / (20.0 * math.pi), "r": 0.5, "alpha": 1.0, "beta": 50.0, "s": 1.0},
    "elliptic3d": {"gamma": 1.0 / 100.0, "r": 1.5, "alpha": 1.0, "beta": 50.0, "s": 2.0},
    "burgers-nu": {"gamma": 40.0, "r": 4.0, "floor": 5e-3, "scale": 1.0 / 20.0, "s": 30.0},
    "burgers-u0": {"gamma": 10.0, "r": 2.0},
    "control-shape": {"gamma": 5.0, "r": 4.0},
    "control-k": {"gamma": 6.0, "r": 4.0, "floor": 5e-3, "scale": 1.0 / 10.0, "s": 5.0},
}


def contrast_field(grid, preset, rng):
    """GRF pushed through the contrast map, using a named preset."""
    cfg = GRF_PRESETS[preset]
    psi = grf_sample(grid, cfg["gamma"], cfg["r"], rng)
    return contrast_map(psi, cfg["alpha"], cfg["beta"], cfg["s"])


def shifted_tanh_field(grid, preset, rng):
    """GRF mapped through ``floor + (1 + tanh(s psi)) * scale`` (strictly
    positive, used for viscosity and conductivity recipes)."""
    cfg = GRF_PRESETS[preset]
    psi = grf_sample_normalized(grid, cfg["gamma"], cfg["r"], rng)
    vals = cfg["floor"] + (1.0 + np.tanh(cfg["s"] * psi.values)) * cfg["scale"]
    return FieldSample(grid=grid, values=vals)


def spawn_rngs(seed, count):
    """Independent per-sample generators from one master seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]
