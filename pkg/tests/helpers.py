"""Shared builders and independent oracles used across the test modules.

Oracles here deliberately avoid the library's own computational paths:
moments come from series expansions, posteriors from dense-grid quadrature
or exhaustive enumeration, and counting updates from plain Python loops.
"""

import math

import numpy as np

from gtvcm.data import Dataset, PriorConfig, init_state
from gtvcm.protocols import Pool
from gtvcm.sampler import FitContext


# ---------------------------------------------------------------------------
# Polya-Gamma moment oracles (series representation, truncated + tail bound)


def pg_mean_series(z, terms=200_000):
    k = np.arange(1, terms + 1) - 0.5
    denom = k * k + z * z / (4.0 * math.pi**2)
    main = float(np.sum(1.0 / denom)) / (2.0 * math.pi**2)
    tail = (1.0 / terms) / (2.0 * math.pi**2)
    return main + tail


def pg_var_series(z, terms=200_000):
    k = np.arange(1, terms + 1) - 0.5
    denom = k * k + z * z / (4.0 * math.pi**2)
    main = float(np.sum(1.0 / denom**2)) / (4.0 * math.pi**4)
    tail = (1.0 / (3.0 * terms**3)) / (4.0 * math.pi**4)
    return main + tail


# ---------------------------------------------------------------------------
# tiny datasets


def singleton_dataset(outcomes, ages=None, covariates=None, clinic=None,
                      assay=2, n_assays=2):
    """Individual-testing dataset with the given observed outcomes."""
    outcomes = np.asarray(outcomes, dtype=int)
    n = outcomes.shape[0]
    if ages is None:
        ages = np.round(np.linspace(-2.0, 2.0, n), 2)
    if covariates is None:
        covariates = np.zeros((n, 0))
    if clinic is None:
        clinic = np.zeros(n, dtype=np.int64)
    pools = [Pool(members=(i,), outcome=int(outcomes[i]), assay=assay)
             for i in range(n)]
    return Dataset(ages=np.asarray(ages, float),
                   covariates=np.asarray(covariates, float),
                   clinic=np.asarray(clinic, np.int64),
                   pools=pools, n_assays=n_assays)


def toy_state_ctx(dataset, priors=None, seed=0):
    """(state, ctx, rng) for a dataset with small-knot defaults."""
    if priors is None:
        priors = PriorConfig(n_knots=4)
    rng = np.random.default_rng(seed)
    state = init_state(dataset, priors, rng)
    ctx = FitContext(dataset, priors, phis=state.phi)
    return state, ctx, rng


# ---------------------------------------------------------------------------
# exhaustive latent-status posterior for tiny pool designs


def enumerate_ytilde_marginals(pools, g_eta, se_by_assay, sp_by_assay):
    """Exact Pr(status_i = 1 | outcomes) by summing over all 2^N configs."""
    n = g_eta.shape[0]
    log_g = np.log(g_eta)
    log_1mg = np.log1p(-g_eta)
    total = np.zeros(n)
    norm = 0.0
    for mask in range(1 << n):
        y = np.array([(mask >> i) & 1 for i in range(n)], dtype=float)
        logp = float(y @ log_g + (1 - y) @ log_1mg)
        for pool in pools:
            z_true = int(any(y[i] > 0 for i in pool.members))
            se = se_by_assay[pool.assay - 1]
            sp = sp_by_assay[pool.assay - 1]
            if z_true:
                p_obs = se if pool.outcome == 1 else 1.0 - se
            else:
                p_obs = 1.0 - sp if pool.outcome == 1 else sp
            logp += math.log(p_obs)
        w = math.exp(logp)
        total += w * y
        norm += w
    return total / norm


# ---------------------------------------------------------------------------
# loop-coded conjugate-update oracles


def oracle_theta_params(priors, d1, d2):
    a1 = priors.a_theta1 + (1 if d1 else 0)
    b1 = priors.b_theta1 + (0 if d1 else 1)
    a2 = priors.a_theta2 + (1 if d2 else 0)
    b2 = priors.b_theta2 + (0 if d2 else 1)
    return a1, b1, a2, b2


def oracle_tau_params(priors, r_mat, beta):
    quad = float(beta @ np.linalg.solve(r_mat, beta))
    return priors.a_tau + len(beta) / 2.0, priors.b_tau + quad / 2.0


def oracle_sigma2_params(priors, gamma):
    acc = 0.0
    for g in gamma:
        acc += g * g
    return priors.a_sigma2 + len(gamma) / 2.0, priors.b_sigma2 + acc / 2.0


def oracle_assay_params(priors, pools, y_tilde, n_assays):
    a_se = [priors.a_se] * n_assays
    b_se = [priors.b_se] * n_assays
    a_sp = [priors.a_sp] * n_assays
    b_sp = [priors.b_sp] * n_assays
    for pool in pools:
        z_true = 1 if any(y_tilde[i] for i in pool.members) else 0
        k = pool.assay - 1
        if z_true == 1 and pool.outcome == 1:
            a_se[k] += 1
        elif z_true == 1 and pool.outcome == 0:
            b_se[k] += 1
        elif z_true == 0 and pool.outcome == 0:
            a_sp[k] += 1
        else:
            b_sp[k] += 1
    return (np.array(a_se), np.array(b_se), np.array(a_sp), np.array(b_sp))
