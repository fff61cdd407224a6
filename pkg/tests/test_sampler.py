import dataclasses
import math

import numpy as np
import pytest
from scipy.special import expit
from scipy.stats import chisquare

from gtvcm.data import Dataset, McmcConfig, PriorConfig, init_state
from gtvcm.harness import ScenarioSpec, build_rep_dataset
from gtvcm.kernels import build_geometry, build_projector, knot_corr_chol, make_knots
from gtvcm.protocols import Pool
from gtvcm.sampler import (FitContext, alpha_posterior_params, assay_posterior_params,
                           coef_block, coef_values, gamma_posterior_params,
                           gibbs_sweep, inclusion_log_weights,
                           phi_log_accept_ratio, recompute_eta, run_chain,
                           sigma2_posterior_params, step1a_update_y_tilde,
                           step1b_update_omega, step2a_update_inclusion,
                           step2b_update_theta, step3a_update_coefficients,
                           step3b_update_tau, step3c_update_phi,
                           step4_update_random_effects, step5_update_assays,
                           tau_posterior_params, theta_posterior_params,
                           ytilde_prob_one)

from helpers import (oracle_assay_params, oracle_sigma2_params,
                     oracle_tau_params, oracle_theta_params,
                     singleton_dataset, toy_state_ctx)


# ---------------------------------------------------------------------------
# step 1(a)


def test_latent_prob_perfect_negative_singleton():
    assert ytilde_prob_one(0.7, [0], [False], [1.0], [1.0]) == 0.0


def test_latent_prob_other_member_positive_cancels_test_factors():
    g = 0.37
    # the pool is truly positive regardless, so the factors cancel
    p = ytilde_prob_one(g, [1], [True], [0.95], [0.98])
    assert p == pytest.approx(g, abs=1e-12)


def test_latent_prob_noisy_positive_singleton():
    p = ytilde_prob_one(0.5, [1], [False], [0.95], [0.98])
    assert p == pytest.approx(0.475 / (0.475 + 0.01), abs=1e-12)


def test_perfect_individual_tests_pin_latent_statuses():
    outcomes = np.array([1, 0, 1, 1, 0, 0, 0, 1])
    ds = singleton_dataset(outcomes)
    priors = PriorConfig(n_knots=4, fixed_se=(1.0, 1.0), fixed_sp=(1.0, 1.0))
    state, ctx, rng = toy_state_ctx(ds, priors)
    for _ in range(30):
        gibbs_sweep(state, ctx, rng)
        assert np.array_equal(state.y_tilde, outcomes)


def test_step1b_definitions_and_mean():
    ds = singleton_dataset(np.array([1, 0] * 1000))
    state, ctx, rng = toy_state_ctx(ds)
    state.eta[:] = 0.0
    step1b_update_omega(state, ctx, rng)
    assert np.all(state.omega > 0)
    assert np.allclose(state.h, (state.y_tilde - 0.5) / state.omega)
    assert state.omega.mean() == pytest.approx(0.25, abs=4 * 0.204 / math.sqrt(2000))
    # spot values from the definition h = (y - 0.5) / omega
    state.y_tilde[0], state.omega[0] = 1, 0.5
    state.y_tilde[1], state.omega[1] = 0, 0.25
    state.h = (state.y_tilde - 0.5) / state.omega
    assert state.h[0] == 1.0 and state.h[1] == -2.0


# ---------------------------------------------------------------------------
# steps 2(a)/2(b)


def _covariate_dataset(rng, n=12, p=1):
    ages = np.round(rng.uniform(-2, 2, n), 2)
    x = rng.standard_normal((n, p))
    outcomes = (rng.random(n) < 0.4).astype(int)
    pools = [Pool(members=(i,), outcome=int(outcomes[i]), assay=2)
             for i in range(n)]
    return Dataset(ages=ages, covariates=x, clinic=np.zeros(n, np.int64),
                   pools=pools, n_assays=2)


def test_inclusion_never_leaves_support_and_theta0_excludes():
    rng = np.random.default_rng(0)
    ds = _covariate_dataset(rng)
    state, ctx, rng = toy_state_ctx(ds)
    state.theta1[1] = 0.0
    for _ in range(25):
        step2a_update_inclusion(state, ctx, 1, rng)
        assert (state.delta1[1], state.delta2[1]) == (0, 0)


def test_inclusion_weights_reduce_to_prior_for_zero_covariate():
    rng = np.random.default_rng(1)
    ds = _covariate_dataset(rng)
    ds.covariates[:, 0] = 0.0
    state, ctx, rng = toy_state_ctx(ds)
    state.theta1[1], state.theta2[1] = 0.6, 0.5
    lw, _ = inclusion_log_weights(state, ctx, 1)
    w = np.exp(lw - lw.max())
    w /= w.sum()
    assert np.allclose(w, [0.4, 0.3, 0.3], atol=1e-12)


def test_inclusion_weights_match_grid_quadrature():
    # five observations, two knots: integrate the coefficient block out on a
    # dense grid and compare with the closed-form categorical weights
    rng = np.random.default_rng(5)
    n, kt = 5, 2
    ages = np.array([-1.0, -0.5, 0.0, 0.5, 1.0])
    x = rng.standard_normal((n, 1))
    pools = [Pool(members=(i,), outcome=int(rng.random() < 0.4), assay=2)
             for i in range(n)]
    ds = Dataset(ages=ages, covariates=x, clinic=np.zeros(n, np.int64),
                 pools=pools, n_assays=2)
    priors = PriorConfig(n_knots=kt, xi_alpha=2.0)
    state, ctx, _ = toy_state_ctx(ds, priors)
    state.omega = rng.uniform(0.3, 2.0, n)
    state.h = rng.standard_normal(n) * 2
    state.eta = rng.standard_normal(n)
    state.theta1[1], state.theta2[1] = 0.55, 0.45
    state.tau[1] = 1.7
    state.delta1[1], state.delta2[1] = 0, 0
    state.alpha[1] = 0.0
    state.beta_knots[1, :] = 0.0

    lw, _ = inclusion_log_weights(state, ctx, 1)
    w_impl = np.exp(lw - lw.max())
    w_impl /= w_impl.sum()

    proj = ctx.projectors[1]
    eq = proj.q()[ctx.geom.age_index]
    xd = ctx.x[:, 1]
    resid = state.h - state.eta
    omega = state.omega
    cov_b = proj.r_mat / state.tau[1]
    cov_b_inv = np.linalg.inv(cov_b)
    _, cov_b_logdet = np.linalg.slogdet(cov_b)
    prior_pmf = np.array([0.45, 0.55 * 0.55, 0.55 * 0.45])

    def loglik(fit):
        return -0.5 * np.sum(omega * (resid - fit) ** 2)

    w00 = prior_pmf[0] * math.exp(loglik(np.zeros(n)))
    agrid = np.linspace(-12, 12, 4001)
    vals = [math.exp(loglik(xd * a)) * math.exp(-0.5 * a * a / priors.xi_alpha)
            / math.sqrt(2 * math.pi * priors.xi_alpha) for a in agrid]
    w10 = prior_pmf[1] * np.trapezoid(vals, agrid)
    bgrid = np.linspace(-9, 9, 121)
    db = bgrid[1] - bgrid[0]
    b1, b2 = np.meshgrid(bgrid, bgrid, indexing="ij")
    bb = np.stack([b1.ravel(), b2.ravel()])
    asub = agrid[::20]
    da = asub[1] - asub[0]
    total = 0.0
    for a in asub:
        fit = xd[:, None] * (a + eq @ bb)
        ll = -0.5 * np.einsum("i,im->m", omega, (resid[:, None] - fit) ** 2)
        lp_b = (-0.5 * np.einsum("km,km->m", bb, cov_b_inv @ bb)
                - 0.5 * cov_b_logdet - math.log(2 * math.pi))
        lp_a = -0.5 * a * a / priors.xi_alpha \
            - 0.5 * math.log(2 * math.pi * priors.xi_alpha)
        total += float(np.sum(np.exp(ll + lp_b + lp_a))) * da * db * db
    w11 = prior_pmf[2] * total
    w_oracle = np.array([w00, w10, w11])
    w_oracle /= w_oracle.sum()
    assert np.max(np.abs(w_impl - w_oracle)) < 1e-3


def test_theta_update_examples_and_mean():
    priors = PriorConfig(n_knots=3)
    assert theta_posterior_params(priors, 1, 0) == (2.0, 1.0, 1.0, 2.0)
    assert theta_posterior_params(priors, 0, 0) == (1.0, 2.0, 1.0, 2.0)
    ds = _covariate_dataset(np.random.default_rng(0), n=4)
    state, ctx, rng = toy_state_ctx(ds)
    state.delta1[1] = 1
    state.delta2[1] = 0
    draws = []
    for _ in range(20_000):
        step2b_update_theta(state, ctx, 1, rng)
        draws.append(state.theta1[1])
    # Beta(2, 1): mean 2/3, sd = sqrt(2)/6
    se = (math.sqrt(2) / 6) / math.sqrt(len(draws))
    assert np.mean(draws) == pytest.approx(2 / 3, abs=4 * se)


# ---------------------------------------------------------------------------
# step 3(a)


def test_coefficients_zero_state_clears_fit():
    rng = np.random.default_rng(2)
    ds = _covariate_dataset(rng)
    state, ctx, rng = toy_state_ctx(ds)
    state.delta1[1], state.delta2[1] = 1, 1
    state.alpha[1] = 1.3
    state.beta_knots[1, :] = rng.standard_normal(4)
    state.eta = recompute_eta(state, ctx)
    state.delta1[1], state.delta2[1] = 0, 0
    # eta still carries the old fit; the block removes it before drawing
    block_fit = ctx.x[:, 1] * coef_values(state, ctx, 1)
    assert np.allclose(block_fit, 0.0)  # delta1 = 0 already nulls the values
    step3a_update_coefficients(state, ctx, 1, rng)
    assert state.alpha[1] == 0.0
    assert np.all(state.beta_knots[1] == 0.0)
    assert np.allclose(coef_values(state, ctx, 1), 0.0)


def test_constant_effect_posterior_single_observation():
    # one contributing observation: omega = 1, x = 1, residual 2, prior
    # variance 50 (the second row has x = 0 and drops out of the block)
    ds = Dataset(ages=np.array([0.0, 1.0]), covariates=np.array([[1.0], [0.0]]),
                 clinic=np.zeros(2, np.int64),
                 pools=[Pool(members=(0,), outcome=1, assay=2),
                        Pool(members=(1,), outcome=0, assay=2)], n_assays=2)
    state, ctx, rng = toy_state_ctx(ds, PriorConfig(n_knots=3))
    state.omega[:] = 1.0
    state.eta[:] = 0.0
    state.h[:] = 2.0
    state.delta1[1], state.delta2[1] = 1, 0
    state.alpha[1] = 0.0
    block = coef_block(state, ctx, 1, with_joint=False)
    mean, var = alpha_posterior_params(ctx.priors, block)
    assert mean == pytest.approx(2.0 / 1.02, rel=1e-12)
    assert var == pytest.approx(1.0 / 1.02, rel=1e-12)
    draws = []
    for _ in range(20_000):
        state.eta[:] = 0.0
        state.alpha[1] = 0.0
        step3a_update_coefficients(state, ctx, 1, rng)
        draws.append(state.alpha[1])
    draws = np.asarray(draws)
    assert draws.mean() == pytest.approx(mean, abs=4 * math.sqrt(var / len(draws)))
    assert draws.var() == pytest.approx(var, rel=0.1)


def test_varying_draw_centers_fitted_curve():
    rng = np.random.default_rng(3)
    ds = _covariate_dataset(rng, n=40)
    state, ctx, rng = toy_state_ctx(ds)
    state.omega = rng.uniform(0.2, 1.5, 40)
    state.h = rng.standard_normal(40)
    state.delta1[1], state.delta2[1] = 1, 1
    for _ in range(10):
        step3a_update_coefficients(state, ctx, 1, rng)
        curve = coef_values(state, ctx, 1) - state.alpha[1]
        assert abs(curve.sum()) < 1e-8
        assert np.any(state.beta_knots[1] != 0)


def test_eta_updated_incrementally_after_coefficient_draw():
    rng = np.random.default_rng(4)
    ds = _covariate_dataset(rng, n=25)
    state, ctx, rng = toy_state_ctx(ds)
    state.omega = rng.uniform(0.2, 1.5, 25)
    state.h = rng.standard_normal(25)
    state.delta1[1], state.delta2[1] = 1, 1
    step3a_update_coefficients(state, ctx, 1, rng)
    assert np.max(np.abs(state.eta - recompute_eta(state, ctx))) < 1e-10


# ---------------------------------------------------------------------------
# step 3(b) and 3(c)


def test_tau_params_examples():
    priors = PriorConfig(a_tau=2.0, b_tau=1.0, n_knots=3)
    assert tau_posterior_params(priors, 3, 4.0) == (3.5, 3.0)
    assert tau_posterior_params(priors, 3, 0.0) == (3.5, 1.0)


def test_tau_draw_moments():
    ds = singleton_dataset([0, 1, 0, 1])
    state, ctx, rng = toy_state_ctx(ds)
    state.beta_knots[0, :] = np.array([0.3, -0.2, 0.4, 0.1])
    quad = ctx.projectors[0].prior_quad(state.beta_knots[0])
    shape, rate = tau_posterior_params(ctx.priors, 4, quad)
    draws = []
    for _ in range(20_000):
        step3b_update_tau(state, ctx, 0, rng)
        draws.append(state.tau[0])
    mean = shape / rate
    se = math.sqrt(shape) / rate / math.sqrt(len(draws))
    assert np.mean(draws) == pytest.approx(mean, abs=4 * se)


def test_phi_ratio_zero_step_accepts():
    ds = singleton_dataset([0, 1, 1, 0, 1])
    state, ctx, _ = toy_state_ctx(ds)
    state.beta_knots[0, :] = np.array([0.2, -0.1, 0.3, 0.0])
    log_ratio, _ = phi_log_accept_ratio(
        ctx.geom, ctx.projectors[0], state.beta_knots[0], 1.0,
        float(state.phi[0]), float(state.phi[0]), ctx.priors)
    assert log_ratio == pytest.approx(0.0, abs=1e-12)


def test_phi_ratio_zero_curve_reduces_to_determinants():
    ds = singleton_dataset([0, 1, 1, 0, 1])
    state, ctx, _ = toy_state_ctx(ds)
    beta = np.zeros(4)
    priors = ctx.priors
    cur, prop = 0.2, 0.5
    _, chol_cur, logdet_cur = knot_corr_chol(ctx.geom, cur)
    proj_cur = build_projector(ctx.geom, cur)
    log_ratio, _ = phi_log_accept_ratio(ctx.geom, proj_cur, beta, 2.3,
                                        cur, prop, priors)
    _, _, logdet_prop = knot_corr_chol(ctx.geom, prop)
    jac = (math.log((priors.b_phi - prop) * (prop - priors.a_phi))
           - math.log((priors.b_phi - cur) * (cur - priors.a_phi)))
    assert log_ratio == pytest.approx(-0.5 * (logdet_prop - logdet_cur) + jac,
                                      abs=1e-10)


def test_phi_moves_track_quadrature_posterior():
    # freeze the curve at a prior draw and let only the range move; the
    # long-run histogram must match the 1-D quadrature of its conditional
    priors = PriorConfig(n_knots=30)
    ages = np.round(np.linspace(-3, 3, 60), 2)
    ds = singleton_dataset(np.zeros(60, dtype=int), ages=ages)
    state, ctx, _ = toy_state_ctx(ds, priors)
    rng = np.random.default_rng(11)
    phi0, tau0 = 0.3, 4.0
    _, chol0, _ = knot_corr_chol(ctx.geom, phi0)
    beta = chol0 @ rng.standard_normal(30) / math.sqrt(tau0)
    state.beta_knots[0, :] = beta
    state.tau[0] = tau0
    state.phi[0] = phi0
    state.delta2[0] = 0  # keep the curve out of eta so only phi moves matter
    samples = []
    accepted = 0
    n_steps = 40_000
    for step in range(n_steps):
        accepted += step3c_update_phi(state, ctx, 0, rng)
        if step % 20 == 19:
            samples.append(float(state.phi[0]))
    accept_rate = accepted / n_steps
    assert 0.1 < accept_rate < 0.9
    # quadrature of the conditional density over the allowed range
    grid = np.linspace(priors.a_phi + 1e-6, priors.b_phi - 1e-6, 600)
    logd = np.empty(grid.size)
    for k, phi in enumerate(grid):
        _, chol, logdet = knot_corr_chol(ctx.geom, phi)
        y = np.linalg.solve(chol, beta)
        logd[k] = -0.5 * logdet - 0.5 * tau0 * float(y @ y)
    dens = np.exp(logd - logd.max())
    dens /= np.trapezoid(dens, grid)
    cdf = np.concatenate([[0.0], np.cumsum((dens[1:] + dens[:-1]) / 2
                                           * np.diff(grid))])
    cdf /= cdf[-1]
    edges = np.interp(np.linspace(0, 1, 11), cdf, grid)
    counts, _ = np.histogram(samples, bins=edges)
    result = chisquare(counts)
    assert result.pvalue > 0.01


# ---------------------------------------------------------------------------
# steps 4 and 5


def test_gamma_params_empty_clinic_is_prior():
    ds = singleton_dataset([0, 1, 0], clinic=np.array([0, 2, 2]))
    state, ctx, _ = toy_state_ctx(ds)
    state.sigma2 = 0.7
    mean, var = gamma_posterior_params(state, ctx)
    assert mean[1] == 0.0
    assert var[1] == pytest.approx(0.7)


def test_gamma_params_match_grid_integration():
    rng = np.random.default_rng(6)
    ds = singleton_dataset(rng.integers(0, 2, 8), clinic=np.zeros(8, np.int64))
    state, ctx, _ = toy_state_ctx(ds)
    state.omega = rng.uniform(0.2, 2.0, 8)
    state.h = rng.standard_normal(8)
    state.eta = rng.standard_normal(8)
    state.gamma = np.array([0.4])
    state.sigma2 = 0.8
    mean, var = gamma_posterior_params(state, ctx)
    resid = state.h - (state.eta - state.gamma[0])
    grid = np.linspace(-6, 6, 20_001)
    logd = (-0.5 * np.sum(state.omega[:, None]
                          * (resid[:, None] - grid[None, :]) ** 2, axis=0)
            - 0.5 * grid**2 / state.sigma2)
    dens = np.exp(logd - logd.max())
    dens /= np.trapezoid(dens, grid)
    grid_mean = np.trapezoid(grid * dens, grid)
    grid_var = np.trapezoid((grid - grid_mean) ** 2 * dens, grid)
    assert mean[0] == pytest.approx(grid_mean, abs=1e-3)
    assert var[0] == pytest.approx(grid_var, abs=1e-3)


def test_sigma2_params_example():
    priors = PriorConfig(a_sigma2=2.0, b_sigma2=1.0, n_knots=3)
    shape, rate = sigma2_posterior_params(priors, np.array([1.0, -1.0]))
    assert (shape, rate) == (3.0, 2.0)


def test_assay_params_counting_example():
    pools = [Pool(members=(0,), outcome=1, assay=1),
             Pool(members=(1,), outcome=1, assay=1),
             Pool(members=(2,), outcome=0, assay=1)]
    ds = Dataset(ages=np.array([0.0, 0.5, 1.0]), covariates=np.zeros((3, 0)),
                 clinic=np.zeros(3, np.int64), pools=pools, n_assays=1)
    priors = PriorConfig(n_knots=3)
    state, ctx, _ = toy_state_ctx(ds, priors)
    y = np.array([1, 1, 1], dtype=np.int8)
    a_se, b_se, a_sp, b_sp = assay_posterior_params(priors, ctx, y)
    assert (a_se[0], b_se[0]) == (2.5, 1.5)
    assert (a_sp[0], b_sp[0]) == (0.5, 0.5)  # no truly negative pools


def test_assays_with_no_pools_draw_from_prior():
    ds = singleton_dataset([1, 0, 1])  # all pools use assay 2
    state, ctx, rng = toy_state_ctx(ds)
    draws = []
    for _ in range(4000):
        step5_update_assays(state, ctx, rng)
        draws.append(state.se[0])
    # Beta(1/2, 1/2) prior has mean 1/2 and sd sqrt(1/8)
    se = math.sqrt(0.125 / len(draws))
    assert np.mean(draws) == pytest.approx(0.5, abs=5 * se)


def test_fixed_assays_never_move():
    ds = singleton_dataset([1, 0, 1])
    priors = PriorConfig(n_knots=4, fixed_se=(0.9, 0.9), fixed_sp=(0.8, 0.8))
    state, ctx, rng = toy_state_ctx(ds, priors)
    for _ in range(20):
        gibbs_sweep(state, ctx, rng)
    assert np.all(state.se == 0.9)
    assert np.all(state.sp == 0.8)


# ---------------------------------------------------------------------------
# conjugate-update oracle suite (1000 randomized toy states)


def test_conjugate_updates_match_loop_oracles():
    rng = np.random.default_rng(99)
    priors = PriorConfig(a_theta1=1.0, b_theta1=1.0, a_theta2=1.0,
                         b_theta2=1.0, n_knots=5)
    geom = build_geometry(np.round(np.linspace(-1, 1, 30), 2),
                          make_knots(-1, 1, 5), 2.0)
    for _ in range(1000):
        d1 = int(rng.random() < 0.6)
        d2 = int(rng.random() < 0.5) if d1 else 0
        assert theta_posterior_params(priors, d1, d2) \
            == oracle_theta_params(priors, d1, d2)

        phi = rng.uniform(0.08, 0.74)
        proj = build_projector(geom, phi)
        beta = rng.standard_normal(5)
        shape, rate = tau_posterior_params(priors, 5, proj.prior_quad(beta))
        o_shape, o_rate = oracle_tau_params(priors, proj.r_mat, beta)
        assert shape == o_shape
        assert rate == pytest.approx(o_rate, rel=1e-9)

        gamma = rng.standard_normal(rng.integers(1, 9))
        shape, rate = sigma2_posterior_params(priors, gamma)
        o_shape, o_rate = oracle_sigma2_params(priors, gamma)
        assert shape == o_shape
        assert rate == pytest.approx(o_rate, rel=1e-12)

        n = int(rng.integers(3, 9))
        pools = []
        cursor = 0
        while cursor < n:
            size = int(rng.integers(1, 4))
            members = tuple(range(cursor, min(cursor + size, n)))
            pools.append(Pool(members=members,
                              outcome=int(rng.random() < 0.5),
                              assay=int(rng.integers(1, 3))))
            cursor += size
        ds = Dataset(ages=np.round(np.linspace(0, 1, n), 2),
                     covariates=np.zeros((n, 0)),
                     clinic=np.zeros(n, np.int64), pools=pools, n_assays=2)
        ctx = FitContext(ds, priors)
        y = rng.integers(0, 2, n).astype(np.int8)
        got = assay_posterior_params(priors, ctx, y)
        want = oracle_assay_params(priors, pools, y, 2)
        for g, w in zip(got, want):
            assert np.array_equal(g, w)


# ---------------------------------------------------------------------------
# sweeps and chains


def test_sweep_is_deterministic():
    spec = ScenarioSpec(n=80, n_clinics=5, reps=1, base_seed=3)
    ds, _, _ = build_rep_dataset(spec, 0)
    priors = PriorConfig(n_knots=8)
    states = []
    for _ in range(2):
        rng = np.random.default_rng(42)
        state = init_state(ds, priors, rng)
        ctx = FitContext(ds, priors, phis=state.phi)
        for _ in range(15):
            gibbs_sweep(state, ctx, rng)
        states.append(state)
    for f in dataclasses.fields(states[0]):
        a, b = getattr(states[0], f.name), getattr(states[1], f.name)
        if isinstance(a, np.ndarray):
            assert np.array_equal(a, b), f.name
        else:
            assert a == b, f.name


def test_support_and_centering_invariants_over_sweeps():
    spec = ScenarioSpec(n=120, n_clinics=6, reps=1, base_seed=5)
    ds, _, _ = build_rep_dataset(spec, 0)
    priors = PriorConfig(n_knots=10)
    rng = np.random.default_rng(1)
    state = init_state(ds, priors, rng)
    ctx = FitContext(ds, priors, phis=state.phi)
    for _ in range(300):
        gibbs_sweep(state, ctx, rng)
        assert np.all((state.delta1 == 0) | (state.delta1 == 1))
        assert np.all(state.delta2 <= state.delta1)
        for d in range(ctx.n_coef):
            if state.delta1[d] and state.delta2[d]:
                curve = coef_values(state, ctx, d) - state.alpha[d]
                assert abs(curve.sum()) < 1e-8
        drift = np.max(np.abs(state.eta - recompute_eta(state, ctx)))
        assert drift < 1e-8


def test_run_chain_counts_and_reproducibility():
    spec = ScenarioSpec(n=50, n_clinics=4, reps=1, base_seed=9)
    ds, _, _ = build_rep_dataset(spec, 0)
    priors = PriorConfig(n_knots=6)
    mcmc = McmcConfig(n_iter=10, burn_in=0, thin=1, seed=2)
    out = run_chain(ds, priors, mcmc)
    assert out.n_draws == 10
    assert not out.interrupted
    out2 = run_chain(ds, priors, mcmc)
    assert np.array_equal(out.psi_grid, out2.psi_grid)
    assert np.array_equal(out.sigma, out2.sigma)
    assert np.array_equal(out.se, out2.se)
    mcmc3 = McmcConfig(n_iter=40, burn_in=10, thin=3, seed=2)
    assert run_chain(ds, priors, mcmc3).n_draws == 10


def test_run_chain_debug_eta_check_passes():
    spec = ScenarioSpec(n=40, n_clinics=4, reps=1, base_seed=13)
    ds, _, _ = build_rep_dataset(spec, 0)
    mcmc = McmcConfig(n_iter=220, burn_in=20, thin=4, seed=0, debug=True)
    out = run_chain(ds, PriorConfig(n_knots=5), mcmc)
    assert out.n_draws == 50


def test_logistic_intercept_reduction_matches_quadrature():
    # perfect individual tests, no clinic effects, constant intercept only:
    # the chain must reproduce the plain logistic-intercept posterior
    rng = np.random.default_rng(21)
    n = 250
    y = (rng.random(n) < 0.3).astype(int)
    ds = singleton_dataset(y)
    priors = PriorConfig(n_knots=4, force_vary_intercept=False,
                         use_random_effects=False,
                         fixed_se=(1.0, 1.0), fixed_sp=(1.0, 1.0))
    mcmc = McmcConfig(n_iter=12_000, burn_in=2_000, thin=5, seed=3)
    out = run_chain(ds, priors, mcmc)
    draws = np.sort(out.psi_bar[:, 0])
    assert draws.shape[0] == 2000
    grid = np.linspace(-3.5, 2.0, 4001)
    k = int(y.sum())
    loglik = k * grid - n * np.log1p(np.exp(grid)) \
        - 0.5 * grid**2 / priors.xi_alpha
    dens = np.exp(loglik - loglik.max())
    cdf = np.concatenate([[0.0], np.cumsum((dens[1:] + dens[:-1]) / 2
                                           * np.diff(grid))])
    cdf /= cdf[-1]
    ecdf = (np.arange(draws.size) + 1) / draws.size
    ks = np.max(np.abs(ecdf - np.interp(draws, grid, cdf)))
    assert ks <= 0.03


def test_latent_status_marginals_match_enumeration():
    # frozen continuous parameters on a 10-person Dorfman design: repeated
    # latent sweeps must reproduce the exhaustive 2^10 conditional marginals
    from helpers import enumerate_ytilde_marginals

    rng = np.random.default_rng(17)
    truth = np.array([1, 0, 0, 1, 0, 0, 0, 0, 0, 0], dtype=np.int8)
    from gtvcm.protocols import AssaySpec, simulate_testing

    record = simulate_testing(truth, "DT", 5, AssaySpec(0.95, 0.98),
                              AssaySpec(0.98, 0.99), rng)
    ds = Dataset(ages=np.round(np.linspace(-2, 2, 10), 2),
                 covariates=np.zeros((10, 0)),
                 clinic=np.zeros(10, np.int64), pools=record.pools, n_assays=2)
    state, ctx, rng = toy_state_ctx(ds, PriorConfig(n_knots=3))
    eta = np.linspace(-2.5, -0.5, 10)
    state.eta = eta.copy()
    state.se = np.array([0.95, 0.98])
    state.sp = np.array([0.98, 0.99])
    exact = enumerate_ytilde_marginals(record.pools, expit(eta),
                                       state.se, state.sp)
    total = np.zeros(10)
    n_sweeps = 50_000
    for _ in range(n_sweeps):
        step1a_update_y_tilde(state, ctx, rng)
        total += state.y_tilde
    assert np.max(np.abs(total / n_sweeps - exact)) <= 0.02


def test_interrupt_flushes_partial_output(monkeypatch):
    spec = ScenarioSpec(n=30, n_clinics=3, reps=1, base_seed=7)
    ds, _, _ = build_rep_dataset(spec, 0)
    calls = {"n": 0}
    import gtvcm.sampler as sampler_mod

    original = sampler_mod.gibbs_sweep

    def exploding_sweep(state, ctx, rng):
        calls["n"] += 1
        if calls["n"] > 25:
            raise KeyboardInterrupt
        return original(state, ctx, rng)

    monkeypatch.setattr(sampler_mod, "gibbs_sweep", exploding_sweep)
    mcmc = McmcConfig(n_iter=100, burn_in=0, thin=1, seed=1)
    out = sampler_mod.run_chain(ds, PriorConfig(n_knots=4), mcmc)
    assert out.interrupted
    assert 0 < out.n_draws <= 25
