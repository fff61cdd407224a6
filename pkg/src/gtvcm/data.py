"""Dataset schema, prior/MCMC configuration, chain state, and file IO.

Individuals and clinics are 0-based in memory; the CSV formats use 1-based
ids.  A dataset is two CSV files: individuals.csv (id, age, x1..xp, clinic)
and pools.csv (pool_id, assay_id, outcome, members with ';'-separated ids).
Configs are flat "key = value" text files whose keys must match dataclass
field names exactly; unknown keys are errors.
"""

import csv
import dataclasses
import os
from dataclasses import dataclass

import numpy as np

from . import pg
from .protocols import Pool


class ConfigError(Exception):
    """Malformed or unknown configuration input."""


class DataFormatError(Exception):
    """Malformed dataset file (carries file/line context in the message)."""


@dataclass
class Dataset:
    """Screened individuals plus every tested pool.

    ages: (N,) working-scale ages; covariates: (N, p); clinic: (N,) 0-based
    clinic index; pools: tested pools with 0-based member indices;
    n_assays: number of distinct assays M referenced by pool assay ids.
    """

    ages: np.ndarray
    covariates: np.ndarray
    clinic: np.ndarray
    pools: list
    n_assays: int

    @property
    def n(self):
        return self.ages.shape[0]

    @property
    def n_covariates(self):
        return self.covariates.shape[1]

    @property
    def n_clinics(self):
        return int(self.clinic.max()) + 1 if self.n else 0


@dataclass(frozen=True)
class PriorConfig:
    """Hyperparameters of every prior plus knot/selection settings."""

    xi_alpha: float = 50.0          # prior variance of the constant effects
    a_tau: float = 2.0              # Gamma prior on the curve precision
    b_tau: float = 1.0
    nu: float = 2.0                 # Matern smoothness (fixed in analyses)
    a_phi: float = 0.075            # uniform range for the Matern decay
    b_phi: float = 0.75
    phi_step: float = 0.1           # sd of the logit-scale random walk
    a_sigma2: float = 2.0           # InverseGamma prior on the clinic variance
    b_sigma2: float = 1.0
    a_theta1: float = 1.0           # Beta priors on the inclusion weights
    b_theta1: float = 1.0
    a_theta2: float = 1.0
    b_theta2: float = 1.0
    a_se: float = 0.5               # Jeffreys Beta priors on assay accuracies
    b_se: float = 0.5
    a_sp: float = 0.5
    b_sp: float = 0.5
    n_knots: int = 100
    force_vary_intercept: bool = True   # False pins the intercept to a constant
    use_random_effects: bool = True
    fixed_se: tuple = ()            # per-assay known values; nan = estimate
    fixed_sp: tuple = ()
    age_center: float = 0.0         # optional affine standardization applied
    age_scale: float = 1.0          # at load time: (age - center) / scale

    def __post_init__(self):
        if not (self.a_phi > 0 and self.a_phi < self.b_phi):
            raise ConfigError("need 0 < a_phi < b_phi")
        for name in ("xi_alpha", "a_tau", "b_tau", "nu", "phi_step",
                     "a_sigma2", "b_sigma2", "a_theta1", "b_theta1",
                     "a_theta2", "b_theta2", "a_se", "b_se", "a_sp", "b_sp",
                     "age_scale"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.n_knots < 1:
            raise ConfigError("n_knots must be >= 1")


@dataclass(frozen=True)
class McmcConfig:
    """Chain length, thinning, seeding, and monitoring settings."""

    n_iter: int = 15000
    burn_in: int = 5000
    thin: int = 5
    seed: int = 0
    monitor_grid: tuple = ()   # empty: 41 points over the observed age range
    debug: bool = False        # recheck the eta cache every 100 sweeps

    def __post_init__(self):
        if self.thin < 1:
            raise ConfigError("thin must be >= 1")
        if not (0 <= self.burn_in < self.n_iter):
            raise ConfigError("need 0 <= burn_in < n_iter")

    @property
    def n_retained(self):
        return (self.n_iter - self.burn_in) // self.thin


@dataclass
class ChainState:
    """Full parameter and latent-variable state of one chain.

    The coefficient axis has p+1 entries with index 0 the intercept.  `eta`
    caches the linear predictor of every individual and `h` the working
    response (y_tilde - 0.5) / omega; both are maintained incrementally.
    """

    y_tilde: np.ndarray    # (N,) int8 latent statuses
    omega: np.ndarray      # (N,) augmentation draws
    h: np.ndarray          # (N,)
    delta1: np.ndarray     # (D,) int8
    delta2: np.ndarray     # (D,) int8
    alpha: np.ndarray      # (D,)
    beta_knots: np.ndarray  # (D, Kt)
    tau: np.ndarray        # (D,)
    phi: np.ndarray        # (D,)
    theta1: np.ndarray     # (D,)
    theta2: np.ndarray     # (D,)
    gamma: np.ndarray      # (L,)
    sigma2: float
    se: np.ndarray         # (M,)
    sp: np.ndarray         # (M,)
    eta: np.ndarray        # (N,)

    def copy(self):
        kw = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            kw[f.name] = v.copy() if isinstance(v, np.ndarray) else v
        return ChainState(**kw)

    def to_npz(self, path):
        arrays = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        arrays["sigma2"] = np.array(self.sigma2)
        np.savez(path, **arrays)

    @classmethod
    def from_npz(cls, path):
        with np.load(path) as data:
            kw = {f.name: data[f.name] for f in dataclasses.fields(cls)}
        kw["sigma2"] = float(kw["sigma2"])
        return cls(**kw)


def validate(dataset, max_report=20):
    """Check every dataset invariant; returns a list of violation strings.

    An empty list means the dataset is well formed.  Indices in messages are
    1-based to match the file formats.
    """
    problems = []

    def report(msg):
        if len(problems) < max_report:
            problems.append(msg)

    n = dataset.n
    if n == 0:
        return ["dataset has no individuals"]
    if dataset.covariates.shape[0] != n or dataset.clinic.shape[0] != n:
        return ["individual arrays have inconsistent lengths"]
    if not np.all(np.isfinite(dataset.ages)):
        report("non-finite age values")
    if dataset.covariates.size and not np.all(np.isfinite(dataset.covariates)):
        report("non-finite covariate values")
    clinics = np.unique(dataset.clinic)
    expected = np.arange(clinics.size)
    if clinics.size == 0 or not np.array_equal(clinics, expected):
        report("clinic ids not contiguous 1..L")
    covered = np.zeros(n, dtype=bool)
    for k, pool in enumerate(dataset.pools):
        if len(pool.members) == 0:
            report(f"pool {k + 1}: empty member set")
            continue
        members = np.asarray(pool.members)
        if members.min() < 0 or members.max() >= n:
            report(f"pool {k + 1}: member out of range")
            continue
        if len(set(pool.members)) != len(pool.members):
            report(f"pool {k + 1}: duplicate members")
        if pool.outcome not in (0, 1):
            report(f"pool {k + 1}: outcome must be 0 or 1")
        if not (1 <= pool.assay <= dataset.n_assays):
            report(f"pool {k + 1}: assay id outside 1..{dataset.n_assays}")
        covered[members] = True
    for i in np.flatnonzero(~covered):
        report(f"individual {i + 1}: uncovered by any pool")
    return problems


def init_state(dataset, priors, rng, n_knots=None):
    """Starting state: statuses from the most informative test per person.

    The smallest pool touching an individual decides the initial status (an
    individual retest wins over its master pool).  All coefficients start at
    zero.  Unknown assay accuracies start at their conditional posterior
    means given the initial statuses; a symmetric 0.5 start would make the
    first latent sweep uninformative and can lock the chain into the
    label-flipped mode.
    """
    n = dataset.n
    d = dataset.n_covariates + 1
    kt = n_knots if n_knots is not None else priors.n_knots
    best_size = np.full(n, np.iinfo(np.int64).max)
    y0 = np.zeros(n, dtype=np.int8)
    for pool in dataset.pools:
        size = pool.size
        for i in pool.members:
            if size < best_size[i]:
                best_size[i] = size
                y0[i] = pool.outcome
    omega = pg.sample_pg_vec(np.zeros(n), rng)
    delta1 = np.ones(d, dtype=np.int8)
    delta2 = np.zeros(d, dtype=np.int8)
    delta2[0] = 1 if priors.force_vary_intercept else 0
    m = dataset.n_assays
    counts = np.zeros((m, 4))  # n11, n01, n00, n10 per assay
    for pool in dataset.pools:
        z_true = 1 if any(y0[i] for i in pool.members) else 0
        k = pool.assay - 1
        if z_true:
            counts[k, 0 if pool.outcome else 1] += 1
        else:
            counts[k, 2 if pool.outcome == 0 else 3] += 1
    se = (priors.a_se + counts[:, 0]) \
        / (priors.a_se + priors.b_se + counts[:, 0] + counts[:, 1])
    sp = (priors.a_sp + counts[:, 2]) \
        / (priors.a_sp + priors.b_sp + counts[:, 2] + counts[:, 3])
    for k in range(min(len(priors.fixed_se), m)):
        if np.isfinite(priors.fixed_se[k]):
            se[k] = priors.fixed_se[k]
    for k in range(min(len(priors.fixed_sp), m)):
        if np.isfinite(priors.fixed_sp[k]):
            sp[k] = priors.fixed_sp[k]
    return ChainState(
        y_tilde=y0,
        omega=omega,
        h=(y0 - 0.5) / omega,
        delta1=delta1,
        delta2=delta2,
        alpha=np.zeros(d),
        beta_knots=np.zeros((d, kt)),
        tau=np.ones(d),
        phi=np.full(d, 0.5 * (priors.a_phi + priors.b_phi)),
        theta1=np.full(d, 0.5),
        theta2=np.full(d, 0.5),
        gamma=np.zeros(dataset.n_clinics),
        sigma2=1.0,
        se=se,
        sp=sp,
        eta=np.zeros(n),
    )


# ---------------------------------------------------------------------------
# dataset files


def _fmt(x):
    return repr(float(x))


def write_individuals(path, dataset):
    p = dataset.n_covariates
    header = ["id", "age"] + [f"x{j + 1}" for j in range(p)] + ["clinic"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(dataset.n):
            row = [str(i + 1), _fmt(dataset.ages[i])]
            row += [_fmt(v) for v in dataset.covariates[i]]
            row.append(str(int(dataset.clinic[i]) + 1))
            w.writerow(row)


def write_pools(path, pools):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pool_id", "assay_id", "outcome", "members"])
        for k, pool in enumerate(pools):
            members = ";".join(str(i + 1) for i in pool.members)
            w.writerow([str(k + 1), str(pool.assay), str(pool.outcome), members])


def write_dataset(out_dir, dataset):
    os.makedirs(out_dir, exist_ok=True)
    write_individuals(os.path.join(out_dir, "individuals.csv"), dataset)
    write_pools(os.path.join(out_dir, "pools.csv"), dataset.pools)


def _parse_float(text, where):
    try:
        return float(text)
    except ValueError:
        raise DataFormatError(f"{where}: expected a number, got {text!r}") from None


def _parse_int(text, where):
    try:
        return int(text)
    except ValueError:
        raise DataFormatError(f"{where}: expected an integer, got {text!r}") from None


def read_individuals(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError(f"{path}: empty file")
    header = rows[0]
    if header[:2] != ["id", "age"] or header[-1] != "clinic":
        raise DataFormatError(f"{path}:1: bad header {header!r}")
    p = len(header) - 3
    ages, covs, clinic = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        where = f"{path}:{lineno}"
        if len(row) != len(header):
            raise DataFormatError(f"{where}: expected {len(header)} fields")
        ident = _parse_int(row[0], where)
        if ident != lineno - 1:
            raise DataFormatError(f"{where}: ids must be sequential from 1")
        ages.append(_parse_float(row[1], where))
        covs.append([_parse_float(v, where) for v in row[2:2 + p]])
        cl = _parse_int(row[-1], where)
        if cl < 1:
            raise DataFormatError(f"{where}: clinic ids are 1-based")
        clinic.append(cl - 1)
    return (np.array(ages), np.array(covs, dtype=float).reshape(len(ages), p),
            np.array(clinic, dtype=np.int64))


def read_pools(path, n_individuals):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["pool_id", "assay_id", "outcome", "members"]:
        raise DataFormatError(f"{path}:1: bad header")
    pools = []
    for lineno, row in enumerate(rows[1:], start=2):
        where = f"{path}:{lineno}"
        if len(row) != 4:
            raise DataFormatError(f"{where}: expected 4 fields")
        assay = _parse_int(row[1], where)
        outcome = _parse_int(row[2], where)
        if outcome not in (0, 1):
            raise DataFormatError(f"{where}: outcome must be 0 or 1")
        members = []
        for tok in row[3].split(";"):
            ident = _parse_int(tok, where)
            if not (1 <= ident <= n_individuals):
                raise DataFormatError(f"{where}: member id {ident} out of range")
            members.append(ident - 1)
        pools.append(Pool(members=tuple(members), outcome=outcome, assay=assay))
    return pools


def read_dataset(data_dir):
    ages, covs, clinic = read_individuals(os.path.join(data_dir, "individuals.csv"))
    pools = read_pools(os.path.join(data_dir, "pools.csv"), len(ages))
    n_assays = max((pool.assay for pool in pools), default=0)
    return Dataset(ages=ages, covariates=covs, clinic=clinic, pools=pools,
                   n_assays=n_assays)


# ---------------------------------------------------------------------------
# flat key=value config files


def parse_kv_text(text, source="<config>"):
    """Strict parser for flat `key = value` files with '#' comments."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _coerce(raw, typ, key):
    if typ is bool:
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if typ is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if typ is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    if typ is tuple:
        if raw == "":
            return ()
        try:
            return tuple(float(tok) for tok in raw.split(","))
        except ValueError:
            raise ConfigError(f"{key}: expected comma-separated numbers") from None
    return raw


def config_from_mapping(cls, mapping):
    """Build a config dataclass from string values; unknown keys are errors."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(mapping) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    kwargs = {}
    for key, raw in mapping.items():
        typ = fields[key].type
        if isinstance(typ, str):
            typ = {"float": float, "int": int, "bool": bool,
                   "tuple": tuple, "str": str}.get(typ, str)
        kwargs[key] = _coerce(raw, typ, key) if isinstance(raw, str) else raw
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def split_config(mapping, *classes):
    """Split one flat mapping across several config dataclasses."""
    field_owner = {}
    for cls in classes:
        for f in dataclasses.fields(cls):
            field_owner[f.name] = cls
    unknown = set(mapping) - set(field_owner)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    parts = {cls: {} for cls in classes}
    for key, value in mapping.items():
        parts[field_owner[key]][key] = value
    return tuple(config_from_mapping(cls, parts[cls]) for cls in classes)


def load_run_config(path):
    """Read one flat config file into (PriorConfig, McmcConfig)."""
    with open(path) as fh:
        mapping = parse_kv_text(fh.read(), source=path)
    return split_config(mapping, PriorConfig, McmcConfig)


def dataset_round_trip_equal(a, b):
    """True when two datasets are identical field for field."""
    if (a.n, a.n_covariates, a.n_assays) != (b.n, b.n_covariates, b.n_assays):
        return False
    if not (np.array_equal(a.ages, b.ages)
            and np.array_equal(a.covariates, b.covariates)
            and np.array_equal(a.clinic, b.clinic)):
        return False
    if len(a.pools) != len(b.pools):
        return False
    return all(pa == pb for pa, pb in zip(a.pools, b.pools))
