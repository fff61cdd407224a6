"""Exact sampler for the Polya-Gamma distribution PG(1, z).

Uses the alternating-series rejection method on the tilted Jacobi
representation: if X ~ J*(1, |z|/2) then X/4 ~ PG(1, z).  Proposals come
from a two-piece envelope (truncated inverse-Gaussian below the series
crossover point, truncated exponential above it) and are accepted or
rejected by squeezing the partial sums of the alternating series, so every
accepted value is an exact draw.  The mixture weight between the two pieces
is computed in log space, which keeps the sampler stable for tilts well
beyond |z| = 1e4, where the direct expressions underflow.
"""

import math

import numpy as np
from numba import njit

# Series crossover point; both density expansions converge fast around here.
_TRUNC = 0.64
_PI = math.pi
_HALF_PI_SQ = 0.5 * _PI * _PI


@njit(cache=True)
def _norm_logcdf(x):
    # log Phi(x); asymptotic expansion once erfc underflows
    if x > -10.0:
        return math.log(0.5 * math.erfc(-x / math.sqrt(2.0)))
    x2 = x * x
    return (-0.5 * x2 - 0.5 * math.log(2.0 * _PI) - math.log(-x)
            + math.log1p(-1.0 / x2 + 3.0 / (x2 * x2)))


@njit(cache=True)
def _right_piece_prob(z):
    # Probability that the proposal falls in the exponential piece (t, inf).
    t = _TRUNC
    fz = 0.125 * _PI * _PI + 0.5 * z * z
    b = math.sqrt(1.0 / t) * (t * z - 1.0)
    a = -math.sqrt(1.0 / t) * (t * z + 1.0)
    x0 = math.log(fz) + fz * t
    xb = x0 - z + _norm_logcdf(b)
    xa = x0 + z + _norm_logcdf(a)
    qdivp = 4.0 / _PI * (math.exp(xb) + math.exp(xa))
    return 1.0 / (1.0 + qdivp)


@njit(cache=True)
def _rand_trunc_igauss(rng, z):
    # Inverse-Gaussian(1/z, 1) draw restricted to (0, TRUNC].
    t = _TRUNC
    if t * z < 1.0:
        # mean above the cutoff: rejection from the scaled stable tail
        while True:
            e1 = rng.standard_exponential()
            e2 = rng.standard_exponential()
            while e1 * e1 > 2.0 * e2 / t:
                e1 = rng.standard_exponential()
                e2 = rng.standard_exponential()
            x = t / ((1.0 + t * e1) * (1.0 + t * e1))
            if rng.random() <= math.exp(-0.5 * z * z * x):
                return x
    else:
        mu = 1.0 / z
        x = t + 1.0
        while x > t:
            y = rng.standard_normal()
            y *= y
            muy = mu * y
            x = mu + 0.5 * mu * muy - 0.5 * mu * math.sqrt(4.0 * muy + muy * muy)
            if rng.random() > mu / (mu + x):
                x = mu * mu / x
        return x


@njit(cache=True)
def _series_coef(n, x):
    # n-th coefficient of the alternating Jacobi series at x
    np5 = n + 0.5
    if x > _TRUNC:
        return _PI * np5 * math.exp(-np5 * np5 * _HALF_PI_SQ * x)
    return (2.0 / _PI / x) ** 1.5 * _PI * np5 * math.exp(-2.0 * np5 * np5 / x)


@njit(cache=True)
def _sample_pg1(rng, tilt):
    z = 0.5 * abs(tilt)
    fz = 0.125 * _PI * _PI + 0.5 * z * z
    p_right = _right_piece_prob(z)
    while True:
        if rng.random() < p_right:
            x = _TRUNC + rng.standard_exponential() / fz
        else:
            x = _rand_trunc_igauss(rng, z)
        s = _series_coef(0, x)
        y = rng.random() * s
        n = 0
        while True:
            n += 1
            if n % 2 == 1:
                s -= _series_coef(n, x)
                if y <= s:
                    return 0.25 * x
            else:
                s += _series_coef(n, x)
                if y > s:
                    break


@njit(cache=True)
def _sample_pg1_many(rng, tilts, out):
    for i in range(tilts.shape[0]):
        out[i] = _sample_pg1(rng, tilts[i])


def sample_pg(z, rng):
    """One exact PG(1, z) draw; the law depends on z only through |z|."""
    return _sample_pg1(rng, float(z))


def sample_pg_vec(tilts, rng, out=None):
    """Exact PG(1, tilts[i]) draws, one per entry of `tilts`."""
    tilts = np.ascontiguousarray(tilts, dtype=np.float64)
    if out is None:
        out = np.empty(tilts.shape[0])
    _sample_pg1_many(rng, tilts, out)
    return out


def pg_mean(z):
    """Analytic mean of PG(1, z): tanh(z/2) / (2z), continuous at z = 0."""
    z = abs(float(z))
    if z < 1e-12:
        return 0.25
    return math.tanh(0.5 * z) / (2.0 * z)
