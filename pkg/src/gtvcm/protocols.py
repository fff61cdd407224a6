"""Group-testing protocol simulators: individual, Dorfman, and array testing.

All member indices are 0-based in memory (file formats are 1-based, handled
by the IO layer).  Assay ids follow the mixing convention used throughout:
assay 1 tests pooled specimens (size > 1), assay 2 tests single specimens.
"""

from dataclasses import dataclass, field

import numpy as np

PROTOCOLS = ("IT", "DT", "AT")
POOL_ASSAY = 1
INDIV_ASSAY = 2


@dataclass(frozen=True)
class AssaySpec:
    """Sensitivity/specificity pair of one assay."""

    se: float
    sp: float

    def __post_init__(self):
        if not (0.0 < self.se <= 1.0 and 0.0 < self.sp <= 1.0):
            raise ValueError("sensitivity and specificity must be in (0, 1]")


@dataclass(frozen=True)
class Pool:
    """One tested pool: member indices, observed outcome, assay id."""

    members: tuple
    outcome: int
    assay: int

    def __post_init__(self):
        if len(self.members) == 0:
            raise ValueError("pool must have at least one member")

    @property
    def size(self):
        return len(self.members)


@dataclass(frozen=True)
class TestingRecord:
    """All pools emitted by one protocol run, first-stage pools first."""

    pools: list = field(default_factory=list)

    @property
    def tests_used(self):
        return len(self.pools)


def _assay_for(members):
    return POOL_ASSAY if len(members) > 1 else INDIV_ASSAY


def assign_pools(protocol, n, c, rng):
    """First-stage pool assignment: a list of disjoint member-index arrays.

    IT yields n singletons.  DT randomly permutes and fills pools of size c
    (last one may be smaller).  AT fills complete c x c arrays with 2c pools
    (c rows + c columns, every member in exactly one of each); the n mod c^2
    leftover individuals fall back to DT pools of size c.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    if n < 1:
        raise ValueError("need at least one individual")
    if protocol == "IT":
        return [np.array([i]) for i in range(n)]
    if c < 2:
        raise ValueError("pool size must be >= 2 for DT/AT")
    perm = rng.permutation(n)
    pools = []
    if protocol == "DT":
        for start in range(0, n, c):
            pools.append(perm[start:start + c])
        return pools
    n_arrays = n // (c * c)
    for a in range(n_arrays):
        block = perm[a * c * c:(a + 1) * c * c].reshape(c, c)
        for r in range(c):
            pools.append(block[r, :].copy())
        for q in range(c):
            pools.append(block[:, q].copy())
    rem = perm[n_arrays * c * c:]
    for start in range(0, rem.size, c):
        pools.append(rem[start:start + c])
    return pools


def _observed_outcome(truly_positive, spec, rng):
    p = spec.se if truly_positive else 1.0 - spec.sp
    return int(rng.random() < p)


def simulate_testing(truth, protocol, c, pool_assay, indiv_assay, rng):
    """Run a full protocol on true statuses, emitting error-prone outcomes.

    Master pools use `pool_assay` when their size exceeds one and
    `indiv_assay` otherwise.  DT retests every member of a positive
    multi-member master individually.  AT retests row/column intersections
    when both directions flag positives, and whole positive rows (columns)
    when the crossing direction shows none, so no flagged individual escapes
    decoding.  Only noisy outcomes are emitted; true pool statuses are not.
    """
    truth = np.asarray(truth, dtype=np.int8)
    n = truth.shape[0]
    first_stage = assign_pools(protocol, n, c, rng)
    pools = []

    def run_pool(members):
        spec = pool_assay if len(members) > 1 else indiv_assay
        z_true = bool(truth[members].any())
        z = _observed_outcome(z_true, spec, rng)
        pools.append(Pool(members=tuple(int(i) for i in members),
                          outcome=z, assay=_assay_for(members)))
        return z

    if protocol == "IT":
        for members in first_stage:
            run_pool(members)
        return TestingRecord(pools=pools)

    if protocol == "DT":
        outcomes = [run_pool(members) for members in first_stage]
        for members, z in zip(first_stage, outcomes):
            if z == 1 and len(members) > 1:
                for i in members:
                    run_pool(np.array([i]))
        return TestingRecord(pools=pools)

    # AT: first stage is rows+columns per complete array, then DT leftovers
    n_arrays = n // (c * c)
    array_pools = first_stage[:2 * c * n_arrays]
    leftover_pools = first_stage[2 * c * n_arrays:]
    outcomes = [run_pool(members) for members in array_pools]
    for a in range(n_arrays):
        rows = array_pools[2 * c * a:2 * c * a + c]
        row_pos = [r for r in range(c) if outcomes[2 * c * a + r] == 1]
        col_pos = [q for q in range(c) if outcomes[2 * c * a + c + q] == 1]
        retest = set()
        if row_pos and col_pos:
            for r in row_pos:
                for q in col_pos:
                    retest.add(int(rows[r][q]))
        elif row_pos:
            for r in row_pos:
                retest.update(int(i) for i in rows[r])
        elif col_pos:
            cols = array_pools[2 * c * a + c:2 * c * a + 2 * c]
            for q in col_pos:
                retest.update(int(i) for i in cols[q])
        for i in sorted(retest):
            run_pool(np.array([i]))
    leftover_outcomes = [run_pool(members) for members in leftover_pools]
    for members, z in zip(leftover_pools, leftover_outcomes):
        if z == 1 and len(members) > 1:
            for i in members:
                run_pool(np.array([i]))
    return TestingRecord(pools=pools)


def expected_tests_dorfman(p, c, n, pool_assay):
    """Expected Dorfman test count at common prevalence p (n divisible by c)."""
    if not (0.0 <= p <= 1.0):
        raise ValueError("prevalence must be in [0, 1]")
    if n % c != 0:
        raise ValueError("n must be divisible by c")
    q = (1.0 - p) ** c
    p_master_pos = pool_assay.se * (1.0 - q) + (1.0 - pool_assay.sp) * q
    return (n / c) * (1.0 + c * p_master_pos)
