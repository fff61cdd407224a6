"""Five-step Gibbs sampler for the varying-coefficient group-testing model.

One sweep updates, in order: the latent statuses (sequential scan using the
latest values), the augmentation variables, then per coefficient the
three-state inclusion pair (with the coefficient block integrated out), its
Beta weights, the coefficient block itself, the curve precision, and the
Matern range (random-walk Metropolis on the logit of the bounded range);
finally the clinic effects with their variance and the assay accuracies.

Identification: after every coefficient draw the fitted curve is centered
over the observed individuals (the mean moves into the constant effect), so
the per-coefficient curves sum to zero across the sample by construction.

Numerics: the joint (constant, curve) draw and the marginal three-state
weights are computed in whitened knot coordinates zeta = R^{-1} beta, whose
prior precision is tau * R; this is the same Gaussian draw reorganized so
that no kriging matrix is formed inside the sweep.  All log-determinants go
through Cholesky factors and the categorical draw uses max-subtracted logs.
"""

import math
import time
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import expit

from . import pg
from .data import init_state
from .kernels import (build_design, build_projector, grid_cross, knot_corr_chol,
                      make_knots)

SUPPORT = ((0, 0), (1, 0), (1, 1))


class SamplerError(Exception):
    """Unrecoverable numerical failure inside a Gibbs step."""


def _chol_spd(mat):
    """Cholesky with escalating relative jitter; raises SamplerError at 1e-6."""
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        pass
    scale = float(np.mean(np.diag(mat)))
    for jit in (1e-10, 1e-9, 1e-8, 1e-7, 1e-6):
        try:
            return np.linalg.cholesky(mat + jit * scale * np.eye(mat.shape[0]))
        except np.linalg.LinAlgError:
            continue
    raise SamplerError("posterior precision matrix not positive definite")


def _infer_decimals(ages):
    # snapping knots to the data's rounding lattice makes age-knot distances
    # repeat, so correlation rebuilds evaluate far fewer distinct points
    for k in (0, 1, 2, 3):
        if np.array_equal(ages, np.round(ages, k)):
            return k
    return None


class FitContext:
    """Per-chain working arrays derived from a dataset.

    The projector list is the one mutable member; it is owned by a single
    chain and entries are replaced (never mutated) on range-parameter moves.
    """

    def __init__(self, dataset, priors, phis=None):
        self.dataset = dataset
        self.priors = priors
        n = dataset.n
        self.n = n
        self.n_coef = dataset.n_covariates + 1
        self.n_clinics = dataset.n_clinics
        self.n_assays = dataset.n_assays
        self.x = np.column_stack([np.ones(n), dataset.covariates])
        self.x_sq = self.x * self.x
        self.clinic_idx = dataset.clinic.astype(np.int64)

        pools = dataset.pools
        self.n_pools = len(pools)
        self.pool_ptr = np.zeros(self.n_pools + 1, dtype=np.int64)
        for j, pool in enumerate(pools):
            self.pool_ptr[j + 1] = self.pool_ptr[j] + pool.size
        self.pool_members = np.empty(self.pool_ptr[-1], dtype=np.int64)
        for j, pool in enumerate(pools):
            self.pool_members[self.pool_ptr[j]:self.pool_ptr[j + 1]] = pool.members
        self.pool_outcome = np.array([pool.outcome for pool in pools], dtype=np.int8)
        self.pool_assay_idx = np.array([pool.assay - 1 for pool in pools],
                                       dtype=np.int64)
        # transpose map: pools containing each individual
        counts = np.bincount(self.pool_members, minlength=n)
        self.member_ptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(counts, out=self.member_ptr[1:])
        self.member_pools = np.empty(self.pool_ptr[-1], dtype=np.int64)
        cursor = self.member_ptr[:-1].copy()
        for j in range(self.n_pools):
            for i in self.pool_members[self.pool_ptr[j]:self.pool_ptr[j + 1]]:
                self.member_pools[cursor[i]] = j
                cursor[i] += 1

        if phis is None:
            phis = np.full(self.n_coef, 0.5 * (priors.a_phi + priors.b_phi))
        knots = make_knots(float(dataset.ages.min()), float(dataset.ages.max()),
                           priors.n_knots,
                           snap_decimals=_infer_decimals(dataset.ages))
        design = build_design(dataset.ages, knots, priors.nu, phis)
        self.geom = design.geom
        self.projectors = list(design.projectors)

        m = dataset.n_assays
        self.se_fixed = np.zeros(m, dtype=bool)
        self.sp_fixed = np.zeros(m, dtype=bool)
        for k in range(min(len(priors.fixed_se), m)):
            if np.isfinite(priors.fixed_se[k]):
                self.se_fixed[k] = True
        for k in range(min(len(priors.fixed_sp), m)):
            if np.isfinite(priors.fixed_sp[k]):
                self.sp_fixed[k] = True

    def pool_true_sums(self, y_tilde):
        """Number of truly positive members per pool."""
        return np.add.reduceat(y_tilde[self.pool_members].astype(np.int64),
                               self.pool_ptr[:-1])


def coef_values(state, ctx, d):
    """psi_d at every individual: the constant plus the centered curve."""
    if state.delta1[d] == 0:
        return np.zeros(ctx.n)
    vals = np.full(ctx.n, state.alpha[d])
    if state.delta2[d] == 1:
        proj = ctx.projectors[d]
        curve = proj.curve_at_unique(state.beta_knots[d])
        vals += curve[ctx.geom.age_index]
    return vals


def recompute_eta(state, ctx):
    """Linear predictor rebuilt from scratch (reference for the cache)."""
    eta = state.gamma[ctx.clinic_idx].copy() if ctx.n_clinics else np.zeros(ctx.n)
    for d in range(ctx.n_coef):
        eta += ctx.x[:, d] * coef_values(state, ctx, d)
    return eta


# ---------------------------------------------------------------------------
# step 1: latent statuses and augmentation variables


@njit(cache=True)
def _ytilde_sweep(rng, y, g_eta, pool_sum, member_ptr, member_pools,
                  pool_outcome, se_pool, sp_pool):
    n = y.shape[0]
    for i in range(n):
        gi = g_eta[i]
        p1 = gi
        p0 = 1.0 - gi
        yi = y[i]
        for k in range(member_ptr[i], member_ptr[i + 1]):
            j = member_pools[k]
            fe = se_pool[j] if pool_outcome[j] == 1 else 1.0 - se_pool[j]
            p1 *= fe
            if pool_sum[j] - yi > 0:
                p0 *= fe
            else:
                p0 *= (1.0 - sp_pool[j]) if pool_outcome[j] == 1 else sp_pool[j]
        denom = p1 + p0
        if denom <= 0.0:
            continue  # contradictory perfect tests: keep the current value
        new = 1 if rng.random() < p1 / denom else 0
        if new != yi:
            y[i] = new
            shift = new - yi
            for k in range(member_ptr[i], member_ptr[i + 1]):
                pool_sum[member_pools[k]] += shift


def ytilde_prob_one(g_i, outcomes, others_positive, se_pool, sp_pool):
    """Conditional probability that one latent status is positive.

    `outcomes`, `others_positive`, `se_pool`, `sp_pool` describe the pools
    containing the individual.  Pure helper shared with the tests.
    """
    p1 = g_i
    p0 = 1.0 - g_i
    for z, others, se, sp in zip(outcomes, others_positive, se_pool, sp_pool):
        fe = se if z == 1 else 1.0 - se
        p1 *= fe
        if others:
            p0 *= fe
        else:
            p0 *= (1.0 - sp) if z == 1 else sp
    denom = p1 + p0
    return p1 / denom if denom > 0 else float("nan")


def step1a_update_y_tilde(state, ctx, rng):
    """Sequential Bernoulli refresh of every latent status."""
    g_eta = expit(state.eta)
    pool_sum = ctx.pool_true_sums(state.y_tilde)
    se_pool = state.se[ctx.pool_assay_idx]
    sp_pool = state.sp[ctx.pool_assay_idx]
    _ytilde_sweep(rng, state.y_tilde, g_eta, pool_sum, ctx.member_ptr,
                  ctx.member_pools, ctx.pool_outcome, se_pool, sp_pool)


def step1b_update_omega(state, ctx, rng):
    """omega_i ~ PG(1, eta_i) and the working response h."""
    pg.sample_pg_vec(state.eta, rng, out=state.omega)
    state.h = (state.y_tilde - 0.5) / state.omega


# ---------------------------------------------------------------------------
# step 2/3: coefficient blocks


@dataclass
class CoefBlock:
    """Sufficient pieces for one coefficient visit (recomputed per visit).

    The joint pieces live in whitened knot coordinates: `chol` factors the
    posterior precision of (constant, dual curve), `mu` is its mean.
    """

    old_fit: np.ndarray    # x_d * psi_d under the incoming state
    s_xx: float            # sum omega x^2
    b0: float              # sum omega x resid
    chol: np.ndarray = None
    mu: np.ndarray = None
    logdet: float = 0.0
    quad: float = 0.0


def coef_block(state, ctx, d, with_joint=True):
    """Assemble the residual moments (and joint block) for coefficient d."""
    old_fit = ctx.x[:, d] * coef_values(state, ctx, d)
    resid = state.h - state.eta + old_fit
    wx = state.omega * ctx.x_sq[:, d]
    wr = state.omega * ctx.x[:, d] * resid
    k = ctx.geom.unique_ages.shape[0]
    block = CoefBlock(old_fit=old_fit, s_xx=float(wx.sum()), b0=float(wr.sum()))
    if with_joint:
        proj = ctx.projectors[d]
        cross = proj.cross
        kt = ctx.geom.n_knots
        w_star = np.bincount(ctx.geom.age_index, weights=wx, minlength=k)
        b_knot = np.bincount(ctx.geom.age_index, weights=wr, minlength=k)
        prec = np.empty((kt + 1, kt + 1))
        prec[0, 0] = block.s_xx + 1.0 / ctx.priors.xi_alpha
        top = w_star @ cross
        prec[0, 1:] = top
        prec[1:, 0] = top
        prec[1:, 1:] = cross.T @ (cross * w_star[:, None]) \
            + state.tau[d] * proj.r_mat
        b = np.empty(kt + 1)
        b[0] = block.b0
        b[1:] = b_knot @ cross
        chol = _chol_spd(prec)
        mu = cho_solve((chol, True), b, check_finite=False)
        block.chol = chol
        block.mu = mu
        block.logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
        block.quad = float(b @ mu)
    return block


def inclusion_log_weights(state, ctx, d, block=None):
    """Unnormalized log weights of the support states {00, 10, 11}."""
    if block is None:
        block = coef_block(state, ctx, d)
    priors = ctx.priors
    proj = ctx.projectors[d]
    kt = ctx.geom.n_knots
    theta1 = state.theta1[d]
    theta2 = state.theta2[d]
    with np.errstate(divide="ignore"):
        log_prior = np.log(np.array([
            1.0 - theta1,
            theta1 * (1.0 - theta2),
            theta1 * theta2,
        ]))
    log_xi = math.log(priors.xi_alpha)
    # log det of the whitened curve-prior precision, shared by 00 and 10
    curve_prior_ld = kt * math.log(state.tau[d]) + proj.logdet
    xi_star = block.s_xx + 1.0 / priors.xi_alpha
    lw = np.array([
        log_prior[0] - 0.5 * (-log_xi + curve_prior_ld),
        log_prior[1] - 0.5 * (math.log(xi_star) + curve_prior_ld)
        + 0.5 * block.b0 * block.b0 / xi_star,
        log_prior[2] - 0.5 * block.logdet + 0.5 * block.quad,
    ])
    return lw, block


def step2a_update_inclusion(state, ctx, d, rng, block=None):
    """Categorical draw of the inclusion pair over its three-state support."""
    lw, block = inclusion_log_weights(state, ctx, d, block)
    w = np.exp(lw - lw.max())
    w /= w.sum()
    pick = int(np.searchsorted(np.cumsum(w), rng.random(), side="right"))
    pick = min(pick, 2)
    state.delta1[d], state.delta2[d] = SUPPORT[pick]
    return block


def theta_posterior_params(priors, d1, d2):
    """Beta parameters of the two inclusion weights given one pair."""
    return (priors.a_theta1 + d1, priors.b_theta1 + 1 - d1,
            priors.a_theta2 + d2, priors.b_theta2 + 1 - d2)


def step2b_update_theta(state, ctx, d, rng):
    """Beta refresh of the inclusion weights given the current pair."""
    a1, b1, a2, b2 = theta_posterior_params(
        ctx.priors, int(state.delta1[d]), int(state.delta2[d]))
    state.theta1[d] = rng.beta(a1, b1)
    state.theta2[d] = rng.beta(a2, b2)


def alpha_posterior_params(priors, block):
    """(mean, variance) of the constant effect in the curve-free state."""
    xi_star = block.s_xx + 1.0 / priors.xi_alpha
    return block.b0 / xi_star, 1.0 / xi_star


def step3a_update_coefficients(state, ctx, d, rng, block=None):
    """Draw the constant effect and knot values under the current pair.

    The fitted curve is centered across the observed individuals: its sample
    mean moves into the constant effect, leaving eta unchanged.
    """
    if block is None:
        block = coef_block(state, ctx, d)
    priors = ctx.priors
    d1, d2 = int(state.delta1[d]), int(state.delta2[d])
    if d1 == 0:
        state.alpha[d] = 0.0
        state.beta_knots[d, :] = 0.0
    elif d2 == 0:
        mean, var = alpha_posterior_params(priors, block)
        state.alpha[d] = mean + rng.standard_normal() * math.sqrt(var)
        state.beta_knots[d, :] = 0.0
    else:
        proj = ctx.projectors[d]
        kt = ctx.geom.n_knots
        z = rng.standard_normal(kt + 1)
        lam = block.mu + solve_triangular(block.chol, z, lower=True, trans="T",
                                          check_finite=False)
        dual = lam[1:]
        state.beta_knots[d, :] = proj.r_mat @ dual
        state.alpha[d] = lam[0] + float(proj.center_w @ dual)
    new_fit = ctx.x[:, d] * coef_values(state, ctx, d)
    state.eta += new_fit - block.old_fit


def tau_posterior_params(priors, n_knots, quad):
    """(shape, rate) of the curve-precision Gamma refresh."""
    return priors.a_tau + 0.5 * n_knots, priors.b_tau + 0.5 * quad


def step3b_update_tau(state, ctx, d, rng):
    """Gamma refresh of the curve precision (performed in every state)."""
    beta = state.beta_knots[d]
    quad = ctx.projectors[d].prior_quad(beta) if beta.any() else 0.0
    shape, rate = tau_posterior_params(ctx.priors, ctx.geom.n_knots, quad)
    state.tau[d] = rng.gamma(shape, 1.0 / rate)


def phi_log_accept_ratio(geom, proj, beta, tau, phi_cur, phi_prop, priors):
    """Log MH ratio for a bounded-range move, plus the proposal's factor.

    The ratio combines the knot-prior density of the current curve values
    under both ranges with the Jacobian of the logit reparameterization.
    """
    factor = knot_corr_chol(geom, phi_prop)
    _, chol_prop, logdet_prop = factor
    y = solve_triangular(chol_prop, beta, lower=True, check_finite=False)
    quad_prop = float(y @ y)
    quad_cur = proj.prior_quad(beta)
    log_ratio = (-0.5 * (logdet_prop - proj.logdet)
                 - 0.5 * tau * (quad_prop - quad_cur)
                 + math.log((priors.b_phi - phi_prop) * (phi_prop - priors.a_phi))
                 - math.log((priors.b_phi - phi_cur) * (phi_cur - priors.a_phi)))
    return log_ratio, factor


def step3c_update_phi(state, ctx, d, rng):
    """Random-walk Metropolis step on the logit of the bounded range."""
    priors = ctx.priors
    a, b = priors.a_phi, priors.b_phi
    phi_cur = float(state.phi[d])
    trans = math.log((phi_cur - a) / (b - phi_cur))
    trans_prop = trans + priors.phi_step * rng.standard_normal()
    exp_t = math.exp(trans_prop)
    phi_prop = (b * exp_t + a) / (1.0 + exp_t)
    beta = state.beta_knots[d]
    log_ratio, factor = phi_log_accept_ratio(
        ctx.geom, ctx.projectors[d], beta, float(state.tau[d]),
        phi_cur, phi_prop, priors)
    if math.log(rng.random()) <= min(0.0, log_ratio):
        active = state.delta1[d] == 1 and state.delta2[d] == 1 and beta.any()
        old_fit = ctx.x[:, d] * coef_values(state, ctx, d) if active else None
        ctx.projectors[d] = build_projector(ctx.geom, phi_prop, factor=factor)
        state.phi[d] = phi_prop
        if active:
            new_fit = ctx.x[:, d] * coef_values(state, ctx, d)
            state.eta += new_fit - old_fit
        return True
    return False


# ---------------------------------------------------------------------------
# steps 4 and 5


def gamma_posterior_params(state, ctx):
    """Per-clinic (mean, variance) of the random-effect refresh."""
    L = ctx.n_clinics
    resid = state.h - state.eta + state.gamma[ctx.clinic_idx]
    s_w = np.bincount(ctx.clinic_idx, weights=state.omega, minlength=L)
    s_wr = np.bincount(ctx.clinic_idx, weights=state.omega * resid, minlength=L)
    var = 1.0 / (1.0 / state.sigma2 + s_w)
    return var * s_wr, var


def sigma2_posterior_params(priors, gamma):
    """(shape, rate) of the InverseGamma random-effect-variance refresh."""
    return (priors.a_sigma2 + 0.5 * gamma.shape[0],
            priors.b_sigma2 + 0.5 * float(gamma @ gamma))


def step4_update_random_effects(state, ctx, rng):
    """Clinic effects and their variance; eta tracks the moves."""
    if not ctx.priors.use_random_effects or ctx.n_clinics == 0:
        return
    mean, var = gamma_posterior_params(state, ctx)
    new_gamma = mean + np.sqrt(var) * rng.standard_normal(ctx.n_clinics)
    state.eta += (new_gamma - state.gamma)[ctx.clinic_idx]
    state.gamma = new_gamma
    shape, rate = sigma2_posterior_params(ctx.priors, state.gamma)
    state.sigma2 = rate / rng.gamma(shape, 1.0)


def assay_posterior_params(priors, ctx, y_tilde):
    """Per-assay Beta parameters for sensitivity and specificity."""
    m = ctx.n_assays
    z = ctx.pool_outcome.astype(np.float64)
    zt = (ctx.pool_true_sums(y_tilde) > 0).astype(np.float64)
    idx = ctx.pool_assay_idx
    n11 = np.bincount(idx, weights=z * zt, minlength=m)
    n01 = np.bincount(idx, weights=(1 - z) * zt, minlength=m)
    n00 = np.bincount(idx, weights=(1 - z) * (1 - zt), minlength=m)
    n10 = np.bincount(idx, weights=z * (1 - zt), minlength=m)
    return (priors.a_se + n11, priors.b_se + n01,
            priors.a_sp + n00, priors.b_sp + n10)


def step5_update_assays(state, ctx, rng):
    """Beta counting refresh of every non-fixed assay accuracy."""
    m = ctx.n_assays
    if m == 0:
        return
    a_se, b_se, a_sp, b_sp = assay_posterior_params(ctx.priors, ctx, state.y_tilde)
    for k in range(m):
        if not ctx.se_fixed[k]:
            state.se[k] = rng.beta(a_se[k], b_se[k])
        if not ctx.sp_fixed[k]:
            state.sp[k] = rng.beta(a_sp[k], b_sp[k])


# ---------------------------------------------------------------------------
# sweep and chain driver


def gibbs_sweep(state, ctx, rng):
    """One full iteration; returns per-coefficient range-move acceptances."""
    step1a_update_y_tilde(state, ctx, rng)
    step1b_update_omega(state, ctx, rng)
    accepts = np.zeros(ctx.n_coef, dtype=bool)
    for d in range(ctx.n_coef):
        if d == 0:
            # intercept pair is pinned: joint pieces only needed when varying
            block = coef_block(state, ctx, d,
                               with_joint=bool(state.delta2[0]))
        else:
            block = step2a_update_inclusion(state, ctx, d, rng)
            step2b_update_theta(state, ctx, d, rng)
        step3a_update_coefficients(state, ctx, d, rng, block)
        step3b_update_tau(state, ctx, d, rng)
        accepts[d] = step3c_update_phi(state, ctx, d, rng)
    step4_update_random_effects(state, ctx, rng)
    step5_update_assays(state, ctx, rng)
    # one clean rebuild per sweep keeps incremental drift at rounding level
    state.eta = recompute_eta(state, ctx)
    return accepts


@dataclass
class ChainOutput:
    """Thinned draws of every monitored quantity plus trace metadata."""

    grid: np.ndarray        # (G,) monitor ages
    psi_grid: np.ndarray    # (T, D, G) coefficient curves on the grid
    psi_bar: np.ndarray     # (T, D) constant level of each coefficient
    delta1: np.ndarray      # (T, D)
    delta2: np.ndarray      # (T, D)
    tau: np.ndarray         # (T, D)
    phi: np.ndarray         # (T, D)
    sigma: np.ndarray       # (T,) random-effect standard deviation
    gamma_mean: np.ndarray  # (T,)
    gamma_sd: np.ndarray    # (T,)
    se: np.ndarray          # (T, M)
    sp: np.ndarray          # (T, M)
    accept_phi: np.ndarray  # (D,) acceptance rate of the range moves
    seed: int
    elapsed: float
    interrupted: bool

    @property
    def n_draws(self):
        return self.psi_bar.shape[0]

    @property
    def n_coef(self):
        return self.psi_bar.shape[1]


def run_chain(dataset, priors, mcmc):
    """Burn-in, then retain every thin-th sweep of the monitored quantities."""
    rng = np.random.default_rng(mcmc.seed)
    state = init_state(dataset, priors, rng)
    ctx = FitContext(dataset, priors, phis=state.phi)
    if mcmc.monitor_grid:
        grid = np.asarray(mcmc.monitor_grid, dtype=float)
    else:
        grid = np.linspace(float(dataset.ages.min()), float(dataset.ages.max()), 41)

    n_total = mcmc.n_iter
    n_keep = mcmc.n_retained
    d = ctx.n_coef
    m = ctx.n_assays
    g = grid.shape[0]
    out = ChainOutput(
        grid=grid,
        psi_grid=np.zeros((n_keep, d, g)),
        psi_bar=np.zeros((n_keep, d)),
        delta1=np.zeros((n_keep, d), dtype=np.int8),
        delta2=np.zeros((n_keep, d), dtype=np.int8),
        tau=np.zeros((n_keep, d)),
        phi=np.zeros((n_keep, d)),
        sigma=np.zeros(n_keep),
        gamma_mean=np.zeros(n_keep),
        gamma_sd=np.zeros(n_keep),
        se=np.zeros((n_keep, m)),
        sp=np.zeros((n_keep, m)),
        accept_phi=np.zeros(d),
        seed=mcmc.seed,
        elapsed=0.0,
        interrupted=False,
    )
    grid_xc = [None] * d
    grid_phi = np.full(d, np.nan)
    accept_counts = np.zeros(d)
    kept = 0
    n_done = 0
    start = time.perf_counter()
    try:
        for sweep in range(n_total):
            accept_counts += gibbs_sweep(state, ctx, rng)
            n_done += 1
            if mcmc.debug and (sweep + 1) % 100 == 0:
                drift = np.max(np.abs(state.eta - recompute_eta(state, ctx)))
                if drift > 1e-8:
                    raise SamplerError(f"eta cache drift {drift:.2e} at sweep {sweep}")
            if sweep < mcmc.burn_in or (sweep - mcmc.burn_in + 1) % mcmc.thin:
                continue
            if kept >= n_keep:
                continue
            for dd in range(d):
                if state.delta1[dd] == 0:
                    out.psi_grid[kept, dd, :] = 0.0
                    continue
                val = np.full(g, state.alpha[dd])
                if state.delta2[dd] == 1:
                    proj = ctx.projectors[dd]
                    if grid_xc[dd] is None or grid_phi[dd] != state.phi[dd]:
                        grid_xc[dd] = grid_cross(ctx.geom, proj.phi, grid)
                        grid_phi[dd] = state.phi[dd]
                    dual = proj.dual(state.beta_knots[dd])
                    val += grid_xc[dd] @ dual - float(proj.center_w @ dual)
                out.psi_grid[kept, dd, :] = val
            out.psi_bar[kept] = state.delta1 * state.alpha
            out.delta1[kept] = state.delta1
            out.delta2[kept] = state.delta2
            out.tau[kept] = state.tau
            out.phi[kept] = state.phi
            out.sigma[kept] = math.sqrt(state.sigma2)
            if state.gamma.size:
                out.gamma_mean[kept] = float(state.gamma.mean())
                out.gamma_sd[kept] = float(state.gamma.std())
            out.se[kept] = state.se
            out.sp[kept] = state.sp
            kept += 1
    except KeyboardInterrupt:
        out.interrupted = True
    out.elapsed = time.perf_counter() - start
    out.accept_phi = accept_counts / max(1, n_done)
    if kept < n_keep:  # interrupted: flush what exists
        for name in ("psi_grid", "psi_bar", "delta1", "delta2", "tau", "phi",
                     "sigma", "gamma_mean", "gamma_sd", "se", "sp"):
            setattr(out, name, getattr(out, name)[:kept])
    return out


# ---------------------------------------------------------------------------
# chain output files: one columnar CSV per monitored quantity


def _write_csv(path, header, rows):
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _read_csv(path):
    import csv

    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def write_chain_output(out_dir, out):
    """Serialize draws to CSVs (a curves file per coefficient + scalars)."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    t, d, g = out.psi_grid.shape
    _write_csv(os.path.join(out_dir, "grid.csv"), ["age"],
               [[repr(float(a))] for a in out.grid])
    for dd in range(d):
        header = ["draw"] + [f"g{k + 1}" for k in range(g)]
        rows = [[str(i)] + [repr(float(v)) for v in out.psi_grid[i, dd]]
                for i in range(t)]
        _write_csv(os.path.join(out_dir, f"curves_psi{dd}.csv"), header, rows)
    header = ["draw"]
    for dd in range(d):
        header += [f"delta1_{dd}", f"delta2_{dd}", f"psi_bar_{dd}",
                   f"tau_{dd}", f"phi_{dd}"]
    rows = []
    for i in range(t):
        row = [str(i)]
        for dd in range(d):
            row += [str(int(out.delta1[i, dd])), str(int(out.delta2[i, dd])),
                    repr(float(out.psi_bar[i, dd])), repr(float(out.tau[i, dd])),
                    repr(float(out.phi[i, dd]))]
        rows.append(row)
    _write_csv(os.path.join(out_dir, "coef_draws.csv"), header, rows)
    _write_csv(os.path.join(out_dir, "scalars.csv"),
               ["draw", "sigma", "gamma_mean", "gamma_sd"],
               [[str(i), repr(float(out.sigma[i])), repr(float(out.gamma_mean[i])),
                 repr(float(out.gamma_sd[i]))] for i in range(t)])
    m = out.se.shape[1]
    header = (["draw"] + [f"se{k + 1}" for k in range(m)]
              + [f"sp{k + 1}" for k in range(m)])
    rows = [[str(i)] + [repr(float(v)) for v in out.se[i]]
            + [repr(float(v)) for v in out.sp[i]] for i in range(t)]
    _write_csv(os.path.join(out_dir, "assays.csv"), header, rows)


def read_chain_output(out_dir):
    """Load draws written by `write_chain_output` (trace metadata is not
    stored in the CSVs and comes back empty)."""
    import os

    _, rows = _read_csv(os.path.join(out_dir, "grid.csv"))
    grid = np.array([float(r[0]) for r in rows])
    header, rows = _read_csv(os.path.join(out_dir, "coef_draws.csv"))
    d = (len(header) - 1) // 5
    t = len(rows)
    delta1 = np.zeros((t, d), dtype=np.int8)
    delta2 = np.zeros((t, d), dtype=np.int8)
    psi_bar = np.zeros((t, d))
    tau = np.zeros((t, d))
    phi = np.zeros((t, d))
    for i, row in enumerate(rows):
        vals = row[1:]
        for dd in range(d):
            delta1[i, dd] = int(vals[5 * dd])
            delta2[i, dd] = int(vals[5 * dd + 1])
            psi_bar[i, dd] = float(vals[5 * dd + 2])
            tau[i, dd] = float(vals[5 * dd + 3])
            phi[i, dd] = float(vals[5 * dd + 4])
    psi_grid = np.zeros((t, d, grid.shape[0]))
    for dd in range(d):
        _, rows = _read_csv(os.path.join(out_dir, f"curves_psi{dd}.csv"))
        for i, row in enumerate(rows):
            psi_grid[i, dd, :] = [float(v) for v in row[1:]]
    _, rows = _read_csv(os.path.join(out_dir, "scalars.csv"))
    sigma = np.array([float(r[1]) for r in rows])
    gamma_mean = np.array([float(r[2]) for r in rows])
    gamma_sd = np.array([float(r[3]) for r in rows])
    header, rows = _read_csv(os.path.join(out_dir, "assays.csv"))
    m = (len(header) - 1) // 2
    se = np.array([[float(v) for v in r[1:1 + m]] for r in rows]).reshape(t, m)
    sp = np.array([[float(v) for v in r[1 + m:]] for r in rows]).reshape(t, m)
    return ChainOutput(grid=grid, psi_grid=psi_grid, psi_bar=psi_bar,
                       delta1=delta1, delta2=delta2, tau=tau, phi=phi,
                       sigma=sigma, gamma_mean=gamma_mean, gamma_sd=gamma_sd,
                       se=se, sp=sp, accept_phi=np.full(d, np.nan),
                       seed=-1, elapsed=0.0, interrupted=False)
