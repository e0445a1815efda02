"""Closed testing over all pairwise comparisons, with comparator procedures.

The closed procedure tests every nonempty subset of elementary hypotheses
with an equicoordinate max-|z| test whose critical value is calibrated to the
subset's own correlation matrix, and rejects an elementary hypothesis exactly
when every intersection containing it is rejected.  Because the critical
values are strictly monotone in subset inclusion (consonance), the full
lattice walk collapses to a step-down rule over the ordered statistics; both
forms are implemented and agree.

Subsets whose correlation matrices coincide up to relabelling share one
critical value.  Equivalence is decided by canonicalizing the subset's
comparison graph (arms as vertices weighted by sigma^2/n, comparisons as
edges), which keeps the number of quantile solves far below the 2^m - 1
subset count.
"""

from __future__ import annotations

import itertools
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import ndtri

from .model import (
    ONE_SIDED,
    TWO_SIDED,
    ComparisonStats,
    CorrelationModel,
    TrialConfig,
    correlation,
    index_to_pair,
)
from .mvn import DEFAULT_ACCURACY, DEFAULT_QUANTILE_TOL, equicoord_quantile

__all__ = [
    "ComparisonSet",
    "CriticalValueTable",
    "ClosureDecision",
    "critical_values",
    "closed_test",
    "one_sided_closed_test",
    "batch_closed_test",
    "bonferroni_test",
    "bonferroni_cut",
    "gatekeeping_test",
    "tukey_global_test",
    "unadjusted_test",
]

# Full-lattice enumeration is reserved for family sizes where 2^m stays small.
_LATTICE_LIMIT = 12


@dataclass(frozen=True)
class ComparisonSet:
    """A subset of comparison indices with its induced correlation matrix."""

    members: tuple[int, ...]
    corr: CorrelationModel

    @classmethod
    def build(cls, config: TrialConfig, members: Iterable[int]) -> "ComparisonSet":
        ordered = tuple(sorted(set(int(k) for k in members)))
        if not ordered:
            raise ValueError("a comparison set must not be empty")
        m = config.n_comparisons
        if ordered[0] < 1 or ordered[-1] > m:
            raise ValueError(f"comparison indices must lie in 1..{m}")
        return cls(ordered, correlation(config, ordered))

    @property
    def size(self) -> int:
        return len(self.members)


def _class_key(config: TrialConfig, members: tuple[int, ...]):
    """Canonical form of the subset's vertex-weighted comparison graph.

    Two subsets share a key exactly when some relabelling of arms carries one
    onto the other while preserving sigma_a^2 / n_a, which makes their
    correlation matrices permutation-identical.
    """
    pairs = [index_to_pair(k, config.n_arms, config.sided) for k in members]
    arms = sorted({a for p in pairs for a in (p.i, p.j)})
    v = config.arm_variances(1)
    scale = max(v[a - 1] for a in arms)
    weights = {a: round(v[a - 1] / scale, 12) for a in arms}
    directed = config.sided == ONE_SIDED
    best = None
    for perm in itertools.permutations(range(len(arms))):
        relabel = {arm: perm[idx] for idx, arm in enumerate(arms)}
        if directed:
            edges = sorted((relabel[p.i], relabel[p.j]) for p in pairs)
        else:
            edges = sorted(tuple(sorted((relabel[p.i], relabel[p.j]))) for p in pairs)
        w = tuple(weights[arm] for arm in sorted(arms, key=lambda a: relabel[a]))
        cand = (tuple(edges), w)
        if best is None or cand < best:
            best = cand
    return (config.sided, best)


def _derived_seed(seed: int, key) -> int:
    """Stable per-class seed so table values do not depend on solve order."""
    digest = zlib.crc32(repr(key).encode())
    return (seed * 1_000_003 + digest) % (1 << 63)


def _solve_class(args: tuple) -> float:
    """Worker for parallel class solves; must stay picklable."""
    config, alpha, members, seed, accuracy, tol, tail = args
    corr = correlation(config, members)
    return equicoord_quantile(
        corr, 1.0 - alpha, seed=seed, tol=tol, accuracy=accuracy, tail=tail
    )


def _all_subsets(m: int):
    for size in range(1, m + 1):
        for combo in itertools.combinations(range(1, m + 1), size):
            yield frozenset(combo)


@dataclass
class CriticalValueTable:
    """Per-subset critical values for one configuration and level.

    Values are computed lazily and cached by correlation-equivalence class,
    so looking up all 2^m - 1 subsets costs only one quantile solve per
    class.  The table is deterministic in (config, alpha, seed).
    """

    config: TrialConfig
    alpha: float
    seed: int = 0
    accuracy: float = DEFAULT_ACCURACY
    tol: float = DEFAULT_QUANTILE_TOL
    _class_values: dict = field(default_factory=dict, repr=False)
    _subset_keys: dict = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie strictly between 0 and 1")

    @property
    def n_comparisons(self) -> int:
        return self.config.n_comparisons

    @property
    def tail(self) -> str:
        return "upper" if self.config.sided == ONE_SIDED else "central"

    def _key(self, members: frozenset) -> tuple:
        key = self._subset_keys.get(members)
        if key is None:
            key = _class_key(self.config, tuple(sorted(members)))
            self._subset_keys[members] = key
        return key

    def _solve_args(self, key, members: tuple[int, ...]) -> tuple:
        return (
            self.config,
            self.alpha,
            members,
            _derived_seed(self.seed, key),
            self.accuracy,
            self.tol,
            self.tail,
        )

    def _solve(self, key, members: tuple[int, ...]) -> float:
        return _solve_class(self._solve_args(key, members))

    def value(self, members: Iterable[int]) -> float:
        """Critical value for one subset of comparison indices."""
        subset = frozenset(int(k) for k in members)
        if not subset:
            raise ValueError("a comparison set must not be empty")
        if min(subset) < 1 or max(subset) > self.n_comparisons:
            raise ValueError(f"comparison indices must lie in 1..{self.n_comparisons}")
        key = self._key(subset)
        if key not in self._class_values:
            self._class_values[key] = self._solve(key, tuple(sorted(subset)))
        return self._class_values[key]

    def full_set(self) -> frozenset:
        return frozenset(range(1, self.n_comparisons + 1))

    def entries(self, threads: int = 1) -> dict:
        """Materialize every subset's critical value.

        Guarded by the lattice limit; distinct equivalence classes may be
        solved concurrently with ``threads`` worker processes.  Per-class
        seeds make the result independent of solve order and worker count.
        """
        m = self.n_comparisons
        if m > _LATTICE_LIMIT:
            raise ValueError(
                f"full enumeration of 2^{m} - 1 subsets is not supported; "
                "look values up per subset instead"
            )
        subsets = list(_all_subsets(m))
        pending: dict = {}
        for subset in subsets:
            key = self._key(subset)
            if key not in self._class_values and key not in pending:
                pending[key] = tuple(sorted(subset))
        if pending:
            if threads > 1 and len(pending) > 1:
                jobs = [self._solve_args(key, mem) for key, mem in pending.items()]
                with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
                    solved = list(pool.map(_solve_class, jobs))
            else:
                solved = [self._solve(key, mem) for key, mem in pending.items()]
            self._class_values.update(zip(pending.keys(), solved))
        return {s: self._class_values[self._key(s)] for s in subsets}

    def classes(self, threads: int = 1) -> list[dict]:
        """Summaries of the distinct correlation-equivalence classes."""
        entries = self.entries(threads=threads)
        by_key: dict = {}
        for subset, value in entries.items():
            key = self._key(subset)
            info = by_key.setdefault(
                key,
                {
                    "representative": tuple(sorted(subset)),
                    "size": len(subset),
                    "critical_value": value,
                    "n_subsets": 0,
                },
            )
            info["n_subsets"] += 1
            if tuple(sorted(subset)) < info["representative"]:
                info["representative"] = tuple(sorted(subset))
        out = sorted(by_key.values(), key=lambda d: (d["size"], d["representative"]))
        for idx, info in enumerate(out, start=1):
            info["class_id"] = idx
        return out


def critical_values(
    config: TrialConfig,
    alpha: float,
    seed: int = 0,
    accuracy: float = DEFAULT_ACCURACY,
    tol: float = DEFAULT_QUANTILE_TOL,
) -> CriticalValueTable:
    """Critical-value table for every subset of pairwise comparisons."""
    return CriticalValueTable(config, alpha, seed, accuracy, tol)


@dataclass
class ClosureDecision:
    """Outcome of a multiple-testing procedure on one data set.

    ``rejected[k-1]`` is the global decision for comparison k.  ``local``
    maps each evaluated intersection subset to its local test decision.  For
    staged procedures ``stopped_stage[k-1]`` is the analysis at which the
    global rejection of k was reached (None if never).
    """

    procedure: str
    alpha: float
    rejected: tuple[bool, ...]
    local: dict | None = None
    stopped_stage: tuple | None = None
    meta: dict = field(default_factory=dict)

    def rejected_indices(self) -> list[int]:
        return [k + 1 for k, flag in enumerate(self.rejected) if flag]

    @property
    def n_rejected(self) -> int:
        return sum(self.rejected)


def _extract_z(z: Sequence) -> np.ndarray:
    vals = [s.z if isinstance(s, ComparisonStats) else float(s) for s in z]
    arr = np.asarray(vals, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("need a one-dimensional, nonempty vector of statistics")
    if not np.all(np.isfinite(arr)):
        raise ValueError("statistics must be finite")
    return arr


def _step_down(stat: np.ndarray, table: CriticalValueTable) -> list[bool]:
    """Consonance shortcut: walk statistics in decreasing order; the binding
    intersection for the r-th largest is that statistic together with all
    smaller ones."""
    m = stat.size
    order = np.argsort(-stat, kind="stable")
    rejected = [False] * m
    alive = True
    for rank in range(m):
        idx = int(order[rank])
        if alive:
            tail = frozenset(int(order[s]) + 1 for s in range(rank, m))
            alive = stat[idx] > table.value(tail)
        rejected[idx] = alive
    return rejected


def _lattice(stat: np.ndarray, table: CriticalValueTable):
    m = stat.size
    entries = table.entries()
    local = {s: bool(stat[[k - 1 for k in s]].max() > c) for s, c in entries.items()}
    rejected = []
    for k in range(1, m + 1):
        rejected.append(all(local[s] for s in entries if k in s))
    return rejected, local


def closed_test(
    z: Sequence,
    table: CriticalValueTable,
    method: str = "shortcut",
) -> ClosureDecision:
    """Closed max-|z| test of all pairwise null hypotheses.

    Parameters
    ----------
    z : sequence of ComparisonStats or float
        Standardized statistics, one per comparison index.
    table : CriticalValueTable
        Two-sided table for the same configuration.
    method : str
        ``"shortcut"`` uses the consonance step-down rule (m subset lookups);
        ``"lattice"`` evaluates every intersection explicitly.  Both give
        identical decisions.

    Returns
    -------
    ClosureDecision
        A statistic exactly equal to a boundary does not reject.
    """
    if table.config.sided != TWO_SIDED:
        raise ValueError("closed_test requires a two-sided configuration")
    stat = np.abs(_extract_z(z))
    if stat.size != table.n_comparisons:
        raise ValueError(
            f"expected {table.n_comparisons} statistics, got {stat.size}"
        )
    if method == "shortcut":
        rejected = _step_down(stat, table)
        local = None
        if table.n_comparisons <= _LATTICE_LIMIT:
            entries = table.entries()
            local = {s: bool(stat[[k - 1 for k in s]].max() > c)
                     for s, c in entries.items()}
    elif method == "lattice":
        rejected, local = _lattice(stat, table)
    else:
        raise ValueError(f"unknown method {method!r}")
    return ClosureDecision("dunnett", table.alpha, tuple(rejected), local)


def one_sided_closed_test(
    z: Sequence,
    table: CriticalValueTable,
    method: str = "shortcut",
) -> ClosureDecision:
    """Closed testing of both directional hypotheses for every pair.

    Statistics are signed; the intersection tests are one-sided max-z tests.
    At most one direction per pair can be rejected because the two directed
    statistics are perfectly negatively correlated.
    """
    if table.config.sided != ONE_SIDED:
        raise ValueError("one_sided_closed_test requires a one-sided configuration")
    stat = _extract_z(z)
    if stat.size != table.n_comparisons:
        raise ValueError(
            f"expected {table.n_comparisons} statistics, got {stat.size}"
        )
    if method == "shortcut":
        rejected = _step_down(stat, table)
        local = None
    elif method == "lattice":
        rejected, local = _lattice(stat, table)
    else:
        raise ValueError(f"unknown method {method!r}")
    return ClosureDecision("dunnett", table.alpha, tuple(rejected), local,
                           meta={"sided": ONE_SIDED})


def batch_closed_test(abs_z: np.ndarray, table: CriticalValueTable) -> np.ndarray:
    """Vectorized closure decisions for many replicates at once.

    Parameters
    ----------
    abs_z : ndarray, shape (n_replicates, m)
        Absolute statistics (or signed, for one-sided tables).
    table : CriticalValueTable

    Returns
    -------
    ndarray of bool, shape (n_replicates, m)
    """
    abs_z = np.asarray(abs_z, dtype=float)
    m = table.n_comparisons
    if abs_z.ndim != 2 or abs_z.shape[1] != m:
        raise ValueError(f"abs_z must have shape (n, {m})")
    entries = table.entries()
    rejected = np.ones(abs_z.shape, dtype=bool)
    for subset, c in entries.items():
        cols = [k - 1 for k in subset]
        crossed = abs_z[:, cols].max(axis=1) > c
        rejected[:, cols] &= crossed[:, None]
    return rejected


def bonferroni_cut(alpha: float, m: int) -> float:
    """Two-sided Bonferroni critical value: the upper alpha/(2m) normal point."""
    if m < 1:
        raise ValueError("need at least one comparison")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie strictly between 0 and 1")
    return float(ndtri(1.0 - alpha / (2.0 * m)))


def bonferroni_test(z: Sequence, alpha: float, m: int | None = None) -> ClosureDecision:
    """Single-step Bonferroni comparator: each |z_k| against the alpha/(2m) cut.

    The per-comparison level alpha/m is split evenly across the two tails, so
    the cut for m = 1 coincides with the unadjusted two-sided value.
    """
    stat = np.abs(_extract_z(z))
    m = stat.size if m is None else m
    if m != stat.size:
        raise ValueError("m does not match the number of statistics")
    cut = bonferroni_cut(alpha, m)
    rejected = tuple(bool(s > cut) for s in stat)
    local = None
    if m <= _LATTICE_LIMIT:
        local = {s: bool(stat[[k - 1 for k in s]].max() > cut)
                 for s in _all_subsets(m)}
    meta = {"cut": cut, "normalization": "two-sided, alpha/(2m) per tail"}
    return ClosureDecision("bonferroni", alpha, rejected, local, meta=meta)


def gatekeeping_test(
    z: Sequence, alpha: float, order: Sequence[int] | None = None
) -> ClosureDecision:
    """Fixed-sequence comparator: test at full alpha in a pre-specified order,
    stopping at the first non-rejection."""
    stat = np.abs(_extract_z(z))
    m = stat.size
    if order is None:
        order = list(range(1, m + 1))
    else:
        order = [int(k) for k in order]
        if sorted(order) != list(range(1, m + 1)):
            raise ValueError("order must be a permutation of 1..m")
    cut = float(ndtri(1.0 - alpha / 2.0))
    rejected = [False] * m
    for k in order:
        if stat[k - 1] > cut:
            rejected[k - 1] = True
        else:
            break
    position = {k: pos for pos, k in enumerate(order)}
    local = None
    if m <= _LATTICE_LIMIT:
        # implied closure: an intersection is tested through its earliest
        # member in the sequence
        local = {
            s: bool(stat[min(s, key=position.get) - 1] > cut)
            for s in _all_subsets(m)
        }
    return ClosureDecision(
        "gatekeeping", alpha, tuple(rejected), local, meta={"order": list(order)}
    )


def tukey_global_test(
    z: Sequence,
    config: TrialConfig,
    alpha: float,
    seed: int = 0,
    table: CriticalValueTable | None = None,
) -> ClosureDecision:
    """Single-step comparator: every |z_k| against the full-family critical
    value.  Requires equal per-arm sample sizes and variances."""
    if config.sided != TWO_SIDED:
        raise ValueError("the global single-step comparator is two-sided")
    if len(set(config.sigma2)) != 1:
        raise ValueError("the global single-step comparator requires equal variances")
    for row in config.stage_n:
        if len(set(row)) != 1:
            raise ValueError(
                "the global single-step comparator requires equal per-arm sample sizes"
            )
    stat = np.abs(_extract_z(z))
    if stat.size != config.n_comparisons:
        raise ValueError(f"expected {config.n_comparisons} statistics")
    if table is None:
        table = CriticalValueTable(config, alpha, seed)
    c_full = table.value(table.full_set())
    rejected = tuple(bool(s > c_full) for s in stat)
    local = None
    if stat.size <= _LATTICE_LIMIT:
        local = {s: bool(stat[[k - 1 for k in s]].max() > c_full)
                 for s in _all_subsets(stat.size)}
    return ClosureDecision(
        "tukey_global", alpha, rejected, local, meta={"cut": c_full}
    )


def unadjusted_test(z: Sequence, alpha: float) -> ClosureDecision:
    """Per-comparison two-sided tests at level alpha, with no multiplicity
    adjustment.  Comparator only; does not control the family-wise error."""
    stat = np.abs(_extract_z(z))
    cut = float(ndtri(1.0 - alpha / 2.0))
    rejected = tuple(bool(s > cut) for s in stat)
    return ClosureDecision("unadjusted", alpha, rejected, meta={"cut": cut})
