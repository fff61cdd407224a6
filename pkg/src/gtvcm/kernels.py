"""Matern correlation and knot-based Gaussian-process projection.

Smooth age-varying coefficients are represented by their values at a fixed
set of knots; the projection of knot values to observed ages is the kriging
map Q = R_cross R_knots^{-1}.  A design bundles the shared age geometry
(knots, unique ages, the age -> unique-age index) with one projector per
coefficient, each tied to that coefficient's range parameter phi.

Hot-path organization: projectors store the cross-correlation matrix and
the knot correlation (with its Cholesky factor) rather than Q itself, so a
range move only re-evaluates correlations.  Q is still available on demand.
Correlations are evaluated once per distinct distance when the age/knot
lattice makes distances repeat (ages rounded to a fixed resolution do).
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.special import gamma as gamma_fn
from scipy.special import k0, k1, kv


@dataclass(frozen=True)
class MaternParams:
    """Smoothness nu and range phi of a Matern correlation."""

    nu: float
    phi: float

    def __post_init__(self):
        if not (self.nu > 0 and self.phi > 0):
            raise ValueError("matern parameters must be positive")


class KernelError(Exception):
    """Correlation matrix could not be factorized even after jitter."""


def matern_corr_dist(dist, nu, phi):
    """Matern correlation at distance(s) `dist`; exactly 1 at distance 0."""
    d = np.asarray(dist, dtype=float)
    out = np.ones_like(d)
    nz = d > 0
    x = d[nz] / phi
    if nu == 2.0:
        # K_2(x) = K_0(x) + 2 K_1(x) / x; prefactor 2^{-1}/Gamma(2) = 1/2
        out[nz] = 0.5 * x * x * k0(x) + x * k1(x)
    elif nu == 0.5:
        out[nz] = np.exp(-x)
    else:
        out[nz] = (2.0 ** (1.0 - nu) / gamma_fn(nu)) * x**nu * kv(nu, x)
    return out if out.ndim else float(out)


def matern_corr(u1, u2, params):
    """Matern correlation between ages u1 and u2."""
    return matern_corr_dist(np.abs(np.asarray(u1, float) - np.asarray(u2, float)),
                            params.nu, params.phi)


def make_knots(lo, hi, count, snap_decimals=None):
    """`count` equally spaced knots spanning [lo, hi].

    With `snap_decimals`, knots are rounded to that resolution when rounding
    keeps them strictly increasing; distances to same-resolution ages then
    repeat, which lets correlation rebuilds evaluate far fewer points.
    """
    if count < 1:
        raise ValueError("need at least one knot")
    if count == 1:
        knots = np.array([0.5 * (lo + hi)])
    else:
        knots = np.linspace(lo, hi, count)
    if snap_decimals is not None:
        snapped = np.round(knots, snap_decimals)
        if snapped.size == 1 or np.all(np.diff(snapped) > 0):
            return snapped
    return knots


_JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


def _chol_with_jitter(mat):
    """Lower Cholesky factor, escalating a diagonal jitter up to 1e-6."""
    eye = np.eye(mat.shape[0])
    for jit in _JITTERS:
        try:
            return cholesky(mat if jit == 0.0 else mat + jit * eye,
                            lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            continue
    raise KernelError("correlation matrix not positive definite after jitter "
                      "escalation; check for duplicated knots or ages")


class _DistTable:
    """Distance matrix with optional dedup of repeated values."""

    def __init__(self, dists, dedup_ratio=0.25):
        self.shape = dists.shape
        vals, inverse = np.unique(dists, return_inverse=True)
        if vals.size <= dedup_ratio * dists.size:
            self.vals = vals
            self.inverse = inverse.astype(np.int32)
            self.dense = None
        else:
            self.vals = None
            self.inverse = None
            self.dense = dists

    def corr(self, nu, phi):
        if self.dense is not None:
            return matern_corr_dist(self.dense, nu, phi)
        return matern_corr_dist(self.vals, nu, phi)[self.inverse].reshape(self.shape)


@dataclass(frozen=True)
class AgeGeometry:
    """Shared, phi-independent part of a design."""

    knots: np.ndarray        # (Kt,) sorted
    unique_ages: np.ndarray  # (K,) sorted
    age_index: np.ndarray    # (N,) position of each age in unique_ages
    age_counts: np.ndarray   # (K,) multiplicity of each unique age
    nu: float
    knot_dists: _DistTable   # (Kt, Kt) knot-to-knot distances
    cross_dists: _DistTable  # (K, Kt) age-to-knot distances

    @property
    def n(self):
        return self.age_index.shape[0]

    @property
    def n_knots(self):
        return self.knots.shape[0]


@dataclass(frozen=True)
class CoefProjector:
    """Per-coefficient correlation factors and knot-to-age projection."""

    phi: float
    r_mat: np.ndarray      # (Kt, Kt) knot correlation
    chol: np.ndarray       # its lower Cholesky factor
    logdet: float
    cross: np.ndarray      # (K, Kt) age-to-knot correlations
    center_w: np.ndarray   # (Kt,) weights: mean fitted value = center_w @ dual

    def dual(self, beta):
        """Whitened coordinates R^{-1} beta of the knot values."""
        return cho_solve((self.chol, True), beta, check_finite=False)

    def prior_quad(self, beta):
        """beta' R^{-1} beta via the cached Cholesky factor."""
        y = solve_triangular(self.chol, beta, lower=True, check_finite=False)
        return float(y @ y)

    def curve_at_unique(self, beta, dual=None):
        """Centered coefficient values at the unique ages."""
        if dual is None:
            dual = self.dual(beta)
        return self.cross @ dual - self.center_w @ dual

    def q(self):
        """Kriging weight matrix (materialized on demand, not in hot paths)."""
        return cho_solve((self.chol, True), self.cross.T, check_finite=False).T


@dataclass(frozen=True)
class GppDesign:
    geom: AgeGeometry
    projectors: tuple

    def with_projector(self, d, proj):
        projs = list(self.projectors)
        projs[d] = proj
        return replace(self, projectors=tuple(projs))


def knot_corr_chol(geom, phi):
    """(knot correlation, lower factor, logdet) at range `phi`."""
    r_mat = geom.knot_dists.corr(geom.nu, phi)
    chol = _chol_with_jitter(r_mat)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return r_mat, chol, logdet


def build_projector(geom, phi, factor=None):
    """Build the projector for one coefficient at range `phi`.

    `factor` may carry (r_mat, chol, logdet) already computed for an
    acceptance ratio, avoiding a duplicate factorization.
    """
    if factor is None:
        factor = knot_corr_chol(geom, phi)
    r_mat, chol, logdet = factor
    cross = geom.cross_dists.corr(geom.nu, phi)
    center_w = (geom.age_counts @ cross) / geom.n
    return CoefProjector(phi=float(phi), r_mat=r_mat, chol=chol,
                         logdet=float(logdet), cross=cross, center_w=center_w)


def build_geometry(ages, knots, nu):
    ages = np.asarray(ages, dtype=float)
    knots = np.sort(np.asarray(knots, dtype=float))
    if ages.size == 0 or knots.size == 0:
        raise ValueError("ages and knots must be nonempty")
    if np.any(np.diff(knots) <= 0):
        raise KernelError("duplicated knots make the knot correlation singular")
    unique_ages, age_index = np.unique(ages, return_inverse=True)
    age_counts = np.bincount(age_index, minlength=unique_ages.size).astype(float)
    cross = _DistTable(np.abs(unique_ages[:, None] - knots[None, :]))
    return AgeGeometry(knots=knots, unique_ages=unique_ages,
                       age_index=age_index.astype(np.int64),
                       age_counts=age_counts, nu=float(nu),
                       knot_dists=_DistTable(np.abs(knots[:, None] - knots[None, :])),
                       cross_dists=cross)


def build_design(ages, knots, nu, phis):
    """Design over observed `ages` with one projector per entry of `phis`."""
    geom = build_geometry(ages, knots, nu)
    projectors = tuple(build_projector(geom, phi) for phi in phis)
    return GppDesign(geom=geom, projectors=projectors)


def grid_cross(geom, phi, grid_ages):
    """Age-to-knot correlations of an arbitrary grid at range `phi`."""
    d = np.abs(np.asarray(grid_ages, float)[:, None] - geom.knots[None, :])
    return matern_corr_dist(d, geom.nu, phi)


def grid_projection(geom, proj, grid_ages):
    """Kriging weights mapping knot values to an arbitrary age grid."""
    return cho_solve((proj.chol, True), grid_cross(geom, proj.phi, grid_ages).T,
                     check_finite=False).T
