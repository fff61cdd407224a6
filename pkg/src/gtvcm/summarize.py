"""Posterior summaries: curve bands, HPD intervals, inclusion probabilities."""

import csv
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CurveSummary:
    """Pointwise location and equal-tailed 95% band of curve draws."""

    grid: np.ndarray
    mean: np.ndarray
    median: np.ndarray
    band_lo: np.ndarray
    band_hi: np.ndarray


@dataclass(frozen=True)
class InclusionSummary:
    """Per-covariate inclusion probability and its fixed/varying split."""

    ip: np.ndarray
    ipf: np.ndarray
    ipv: np.ndarray


def curve_summary(grid, draws):
    """Pointwise mean/median and 2.5%/97.5% quantiles of curve draws.

    `draws` has one row per retained draw; quantiles use the linear
    (type-7) empirical rule for cross-implementation reproducibility.
    """
    draws = np.asarray(draws, dtype=float)
    if draws.ndim != 2 or draws.shape[0] < 2:
        raise ValueError("need at least two curve draws")
    return CurveSummary(
        grid=np.asarray(grid, dtype=float),
        mean=draws.mean(axis=0),
        median=np.quantile(draws, 0.5, axis=0),
        band_lo=np.quantile(draws, 0.025, axis=0),
        band_hi=np.quantile(draws, 0.975, axis=0),
    )


def hpd_interval(samples, level=0.95):
    """Shortest interval containing ceil(level * n) sorted samples."""
    x = np.sort(np.asarray(samples, dtype=float))
    n = x.shape[0]
    if n < 20:
        raise ValueError("need at least 20 samples for an HPD interval")
    if not (0.0 < level <= 1.0):
        raise ValueError("level must be in (0, 1]")
    n_in = int(np.ceil(level * n))
    if n_in >= n:
        return float(x[0]), float(x[-1])
    widths = x[n_in - 1:] - x[:n - n_in + 1]
    k = int(np.argmin(widths))
    return float(x[k]), float(x[k + n_in - 1])


def equal_tailed_interval(samples, level=0.95):
    """Central interval with (1-level)/2 mass in each tail (type-7 rule)."""
    tail = 0.5 * (1.0 - level)
    lo, hi = np.quantile(np.asarray(samples, dtype=float), [tail, 1.0 - tail])
    return float(lo), float(hi)


def inclusion_summary(delta1, delta2):
    """Posterior inclusion probabilities from indicator draws.

    IP is the mean of the first indicator, IPV the mean of the product, and
    IPF their difference, so IP = IPF + IPV holds identically.
    """
    d1 = np.asarray(delta1, dtype=float)
    d2 = np.asarray(delta2, dtype=float)
    ip = d1.mean(axis=0)
    ipv = (d1 * d2).mean(axis=0)
    return InclusionSummary(ip=ip, ipf=ip - ipv, ipv=ipv)


def effective_sample_size(x):
    """Initial-positive-sequence estimate of the effective sample size."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if n < 4:
        return float(n)
    x = x - x.mean()
    var = float(x @ x) / n
    if var == 0.0:
        return float(n)
    acf_sum = 0.0
    for lag in range(1, n // 2):
        rho = float(x[:-lag] @ x[lag:]) / (n * var)
        if lag > 1 and rho + prev_rho < 0:
            break
        acf_sum += rho
        prev_rho = rho
    return float(n / (1.0 + 2.0 * acf_sum))


# ---------------------------------------------------------------------------
# plot-ready long-format files


def write_curve_summaries(path, summaries):
    """Long-format CSV: (quantity, age, mean, median, lo, hi) per grid point."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["quantity", "age", "mean", "median", "lo", "hi"])
        for name, summ in summaries:
            for k in range(summ.grid.shape[0]):
                w.writerow([name, repr(float(summ.grid[k])),
                            repr(float(summ.mean[k])), repr(float(summ.median[k])),
                            repr(float(summ.band_lo[k])), repr(float(summ.band_hi[k]))])


def write_inclusion_summary(path, summary, names=None):
    """CSV of (covariate, ip, ipf, ipv), one row per covariate."""
    k = summary.ip.shape[0]
    if names is None:
        names = [f"x{j + 1}" for j in range(k)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["covariate", "ip", "ipf", "ipv"])
        for j in range(k):
            w.writerow([names[j], repr(float(summary.ip[j])),
                        repr(float(summary.ipf[j])), repr(float(summary.ipv[j]))])


def write_scalar_summaries(path, draws_by_name, level=0.95):
    """CSV of posterior location/spread/intervals per scalar quantity."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["quantity", "mean", "median", "sd",
                    "hpd_lo", "hpd_hi", "eq_lo", "eq_hi", "ess"])
        for name, draws in draws_by_name:
            draws = np.asarray(draws, dtype=float)
            hpd_lo, hpd_hi = hpd_interval(draws, level)
            eq_lo, eq_hi = equal_tailed_interval(draws, level)
            w.writerow([name, repr(float(draws.mean())),
                        repr(float(np.quantile(draws, 0.5))),
                        repr(float(draws.std(ddof=1))),
                        repr(hpd_lo), repr(hpd_hi), repr(eq_lo), repr(eq_hi),
                        repr(effective_sample_size(draws))])
