"""Replication-study engine: truth generation, repeated fits, and metrics.

Two truth families (M1/M2) share the constant effects (-3.5, -1, 0.5, -0.5,
0.5, 0, 0) and differ in the three nonzero smooth curves attached to the
intercept and covariates 2 and 4.  Each replication derives its own RNG
streams from (base_seed, rep_index), so any subset of replications can be
re-run bit-for-bit in any order and with any degree of parallelism.
"""

import concurrent.futures
import csv
import dataclasses
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, ndtr

from .data import ConfigError, Dataset, McmcConfig, PriorConfig
from .protocols import AssaySpec, simulate_testing
from .sampler import run_chain
from .summarize import equal_tailed_interval, inclusion_summary

TRUE_ALPHA = np.array([-3.5, -1.0, 0.5, -0.5, 0.5, 0.0, 0.0])
N_COVARIATES = 6


def true_curve(model_set, d, u):
    """The age-varying part of coefficient d under model set M1 or M2."""
    u = np.asarray(u, dtype=float)
    if model_set == "M1":
        curves = {
            0: lambda v: np.sin(np.pi * v / 3.0),
            2: lambda v: v**3 / 8.0,
            4: lambda v: -(v**2) / 4.0 + 0.75,
        }
    elif model_set == "M2":
        curves = {
            0: lambda v: -0.5 * np.exp(-np.sin(v)) + 0.64,
            2: lambda v: 0.3 * v**2 + np.sin(v / 3.0) ** 2 - 0.9,
            4: lambda v: ndtr(v) - 0.5,
        }
    else:
        raise ConfigError(f"unknown model set {model_set!r}")
    return curves[d](u) if d in curves else np.zeros_like(u)


def true_psi(model_set, d, u):
    """True coefficient function psi_d evaluated at ages u."""
    return TRUE_ALPHA[d] + true_curve(model_set, d, u)


@dataclass(frozen=True)
class ScenarioSpec:
    """One simulation cell: truth family, design sizes, protocol, assays."""

    model_set: str = "M1"
    n: int = 3000
    n_clinics: int = 64
    protocol: str = "DT"
    pool_size: int = 5
    reps: int = 50
    base_seed: int = 0
    se1: float = 0.95
    sp1: float = 0.98
    se2: float = 0.98
    sp2: float = 0.99
    sigma_true: float = 0.5

    def __post_init__(self):
        if self.model_set not in ("M1", "M2"):
            raise ConfigError("model_set must be M1 or M2")
        if self.protocol not in ("IT", "DT", "AT"):
            raise ConfigError("protocol must be IT, DT, or AT")
        if self.reps < 1:
            raise ConfigError("reps must be >= 1")
        if self.protocol != "IT" and self.pool_size < 2:
            raise ConfigError("pool_size must be >= 2 for DT/AT")

    def pool_assay(self):
        return AssaySpec(se=self.se1, sp=self.sp1)

    def indiv_assay(self):
        return AssaySpec(se=self.se2, sp=self.sp2)


@dataclass(frozen=True)
class TruthDraw:
    """Generated ground truth of one replication."""

    ages: np.ndarray
    covariates: np.ndarray
    clinic: np.ndarray
    gamma: np.ndarray
    eta: np.ndarray
    y_true: np.ndarray

    @property
    def prevalence(self):
        return float(self.y_true.mean())


def _rep_rng(spec, rep_index, stream):
    return np.random.default_rng(
        np.random.SeedSequence(spec.base_seed, spawn_key=(rep_index, stream)))


def generate_truth(spec, rep_index):
    """Ages, covariates, clinic labels, random effects, and true statuses.

    Pure function of (spec, rep_index): re-running a replication reproduces
    its population bit for bit.
    """
    rng = _rep_rng(spec, rep_index, 0)
    n, L = spec.n, spec.n_clinics
    ages = np.round(rng.uniform(-3.0, 3.0, n), 2)
    x = np.empty((n, N_COVARIATES))
    x[:, 0] = rng.standard_normal(n)
    x[:, 1:] = (rng.random((n, N_COVARIATES - 1)) < 0.5).astype(float)
    clinic = rng.integers(0, L, n)
    gamma = spec.sigma_true * rng.standard_normal(L)
    eta = true_psi(spec.model_set, 0, ages) + gamma[clinic]
    for d in range(1, N_COVARIATES + 1):
        eta += x[:, d - 1] * true_psi(spec.model_set, d, ages)
    y = (rng.random(n) < expit(eta)).astype(np.int8)
    return TruthDraw(ages=ages, covariates=x, clinic=clinic, gamma=gamma,
                     eta=eta, y_true=y)


def build_rep_dataset(spec, rep_index):
    """Generate one replication's truth and its tested pools."""
    truth = generate_truth(spec, rep_index)
    rng = _rep_rng(spec, rep_index, 1)
    record = simulate_testing(truth.y_true, spec.protocol, spec.pool_size,
                              spec.pool_assay(), spec.indiv_assay(), rng)
    n_assays = max(pool.assay for pool in record.pools)
    dataset = Dataset(ages=truth.ages, covariates=truth.covariates,
                      clinic=truth.clinic, pools=record.pools,
                      n_assays=n_assays)
    return dataset, truth, record


def chain_seed(spec, rep_index):
    """Derived integer seed for the fitting chain of one replication."""
    ss = np.random.SeedSequence(spec.base_seed, spawn_key=(rep_index, 2))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def scenario_truths(spec):
    """True values of the scalar estimands tracked by the metrics."""
    return {
        "alpha1": float(TRUE_ALPHA[1]),
        "alpha3": float(TRUE_ALPHA[3]),
        "sigma": spec.sigma_true,
        "se1": spec.se1,
        "sp1": spec.sp1,
        "se2": spec.se2,
        "sp2": spec.sp2,
    }


@dataclass
class RepResult:
    """Posterior point estimates and intervals from one replication."""

    rep_index: int
    estimates: dict          # name -> (median, sd, lo, hi)
    inclusion: np.ndarray    # (p, 3) posterior IP/IPF/IPV per covariate
    tests_used: int
    prevalence: float
    accept_phi: np.ndarray
    elapsed: float


def run_single_rep(spec, rep_index, priors, mcmc):
    """Simulate one replication, fit the chain, and summarize."""
    dataset, truth, record = build_rep_dataset(spec, rep_index)
    mcmc_rep = dataclasses.replace(mcmc, seed=chain_seed(spec, rep_index))
    out = run_chain(dataset, priors, mcmc_rep)

    def summarize_draws(draws):
        lo, hi = equal_tailed_interval(draws)
        return (float(np.quantile(draws, 0.5)), float(np.std(draws, ddof=1)),
                lo, hi)

    estimates = {
        "alpha1": summarize_draws(out.psi_bar[:, 1]),
        "alpha3": summarize_draws(out.psi_bar[:, 3]),
        "sigma": summarize_draws(out.sigma),
    }
    assays_present = sorted({pool.assay for pool in record.pools})
    for assay in assays_present:
        k = assay - 1
        estimates[f"se{assay}"] = summarize_draws(out.se[:, k])
        estimates[f"sp{assay}"] = summarize_draws(out.sp[:, k])
    incl = inclusion_summary(out.delta1[:, 1:], out.delta2[:, 1:])
    inclusion = np.column_stack([incl.ip, incl.ipf, incl.ipv])
    return RepResult(rep_index=rep_index, estimates=estimates,
                     inclusion=inclusion, tests_used=record.tests_used,
                     prevalence=truth.prevalence, accept_phi=out.accept_phi,
                     elapsed=out.elapsed)


def _rep_task(args):
    spec, rep_index, priors, mcmc = args
    try:
        return rep_index, run_single_rep(spec, rep_index, priors, mcmc), None
    except Exception as exc:  # a failed rep is recorded, not fatal
        return rep_index, None, f"{type(exc).__name__}: {exc}"


def _worker_init():
    # replication workers already saturate the cores; keep BLAS sequential
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(1, "blas")
    except Exception:
        pass


@dataclass
class ReplicationMetrics:
    """Aggregated bias/coverage/cost metrics of one scenario."""

    params: dict             # name -> dict(bias, ssd, ese, cp95)
    inclusion: dict          # psi name -> dict(ip, ipf, ipv)
    avg_tests: float
    savings: float
    n_individuals: int
    n_reps: int
    n_failed: int
    failures: list


def aggregate_metrics(spec, results, failures=()):
    """Bias/SSD/ESE/CP95 per estimand plus inclusion and cost summaries."""
    truths = scenario_truths(spec)
    params = {}
    if results:
        names = [n for n in results[0].estimates if n in truths]
        for name in names:
            medians = np.array([r.estimates[name][0] for r in results])
            sds = np.array([r.estimates[name][1] for r in results])
            los = np.array([r.estimates[name][2] for r in results])
            his = np.array([r.estimates[name][3] for r in results])
            truth = truths[name]
            params[name] = {
                "bias": float(np.mean(medians - truth)),
                "ssd": float(np.std(medians, ddof=1)) if len(results) > 1
                       else float("nan"),
                "ese": float(np.mean(sds)),
                "cp95": float(np.mean((los <= truth) & (truth <= his))),
            }
    inclusion = {}
    if results:
        stacked = np.stack([r.inclusion for r in results])
        means = stacked.mean(axis=0)
        for j in range(means.shape[0]):
            inclusion[f"psi{j + 1}"] = {
                "ip": float(means[j, 0]),
                "ipf": float(means[j, 1]),
                "ipv": float(means[j, 2]),
            }
    avg_tests = float(np.mean([r.tests_used for r in results])) if results \
        else float("nan")
    savings = 100.0 * (1.0 - avg_tests / spec.n) if results else float("nan")
    return ReplicationMetrics(params=params, inclusion=inclusion,
                              avg_tests=avg_tests, savings=savings,
                              n_individuals=spec.n, n_reps=len(results),
                              n_failed=len(failures), failures=list(failures))


def run_replications(spec, priors=None, mcmc=None, jobs=1, rep_callback=None):
    """Run every replication of a scenario and aggregate the metrics.

    Replications are independent tasks; with jobs > 1 they run in separate
    processes.  Results are identical for any jobs value because each rep's
    randomness derives only from (base_seed, rep_index).
    """
    priors = priors if priors is not None else PriorConfig()
    mcmc = mcmc if mcmc is not None else McmcConfig()
    tasks = [(spec, rep, priors, mcmc) for rep in range(spec.reps)]
    outcomes = []
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(
                max_workers=jobs, initializer=_worker_init) as pool:
            for outcome in pool.map(_rep_task, tasks):
                outcomes.append(outcome)
                if rep_callback:
                    rep_callback(outcome)
    else:
        for task in tasks:
            outcome = _rep_task(task)
            outcomes.append(outcome)
            if rep_callback:
                rep_callback(outcome)
    outcomes.sort(key=lambda item: item[0])
    results = [res for _, res, err in outcomes if err is None]
    failures = [(rep, err) for rep, _, err in outcomes if err is not None]
    return aggregate_metrics(spec, results, failures), results


METRICS_COLUMNS = ["parameter", "bias", "ssd", "ese", "cp95",
                   "ip", "ipf", "ipv", "avg_tests", "savings"]


def _cell(value):
    # undefined summaries (e.g. SSD with one replication) stay blank
    return "" if math.isnan(value) else repr(value)


def metrics_rows(metrics):
    """Deterministically ordered rows of the metrics table."""
    rows = []
    for name in sorted(metrics.params):
        p = metrics.params[name]
        rows.append([name, _cell(p["bias"]), _cell(p["ssd"]), _cell(p["ese"]),
                     _cell(p["cp95"]), "", "", "", "", ""])
    for name in sorted(metrics.inclusion):
        q = metrics.inclusion[name]
        rows.append([name, "", "", "", "", _cell(q["ip"]), _cell(q["ipf"]),
                     _cell(q["ipv"]), "", ""])
    if metrics.n_reps > 0:
        rows.append(["cost", "", "", "", "", "", "", "",
                     _cell(metrics.avg_tests), _cell(metrics.savings)])
    return rows


def write_metrics(path, metrics):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_COLUMNS)
        w.writerows(metrics_rows(metrics))


def read_metrics(path):
    """Parse a metrics file back into {parameter: {column: value}}."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != METRICS_COLUMNS:
        raise ConfigError(f"{path}: not a metrics file")
    table = {}
    for row in rows[1:]:
        entry = {}
        for col, val in zip(METRICS_COLUMNS[1:], row[1:]):
            if val != "":
                entry[col] = float(val)
        table[row[0]] = entry
    return table


def write_rep_artifacts(rep_dir, result):
    """Per-replication estimates and inclusion files."""
    os.makedirs(rep_dir, exist_ok=True)
    with open(os.path.join(rep_dir, "estimates.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["quantity", "median", "sd", "lo", "hi"])
        for name in sorted(result.estimates):
            med, sd, lo, hi = result.estimates[name]
            w.writerow([name, repr(med), repr(sd), repr(lo), repr(hi)])
        w.writerow(["tests_used", str(result.tests_used), "", "", ""])
    with open(os.path.join(rep_dir, "inclusion.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["covariate", "ip", "ipf", "ipv"])
        for j in range(result.inclusion.shape[0]):
            w.writerow([f"x{j + 1}"] +
                       [repr(float(v)) for v in result.inclusion[j]])
