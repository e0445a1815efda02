"""Trial configuration, comparison indexing, and the joint correlation model.

A trial compares K >= 2 treatment arms with no designated control.  Every
ordered or unordered pair of arms contributes one comparison, and the vector
of standardized pairwise test statistics is multivariate normal with a
correlation structure induced purely by shared arms.  This module owns that
bookkeeping: the bijection between pair labels and flat comparison indices,
the standardized statistics themselves, and the correlation matrix for any
subset of comparisons.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

TWO_SIDED = "two-sided"
ONE_SIDED = "one-sided"

# Relative slack when checking that allocation fractions are constant over
# stages; integer stage sizes that are exact multiples satisfy this exactly.
_PROPORTION_RTOL = 1e-6


def n_comparisons(n_arms: int, sided: str = TWO_SIDED) -> int:
    """Number of pairwise comparisons: K(K-1)/2 unordered, K(K-1) ordered."""
    _check_sided(sided)
    if n_arms < 2:
        raise ValueError("need at least two arms")
    m = n_arms * (n_arms - 1) // 2
    return m if sided == TWO_SIDED else 2 * m


def _check_sided(sided: str) -> None:
    if sided not in (TWO_SIDED, ONE_SIDED):
        raise ValueError(f"sided must be {TWO_SIDED!r} or {ONE_SIDED!r}, got {sided!r}")


@dataclass(frozen=True)
class PairIndex:
    """One comparison: flat index ``k`` (1-based) and its arm pair ``(i, j)``.

    For two-sided comparisons ``i < j`` and the tested difference is
    mu_i - mu_j.  For one-sided comparisons the pair is ordered and the
    alternative is mu_i > mu_j; the reverse direction is a separate index.
    """

    k: int
    i: int
    j: int


def pair_to_index(i: int, j: int, n_arms: int, sided: str = TWO_SIDED) -> PairIndex:
    """Map an arm pair to its flat comparison index.

    Two-sided indices enumerate pairs (i, j) with i < j in lexicographic
    order, k = (i-1)*K - i*(i-1)/2 + (j-i), giving a contiguous range
    1..K(K-1)/2.  One-sided indices reuse the same value for i < j and place
    the reversed pair at k + K(K-1)/2.

    Parameters
    ----------
    i, j : int
        Arm labels in 1..K.  Two-sided requires i < j; one-sided requires
        i != j.
    n_arms : int
        Number of arms K.
    sided : str
        ``"two-sided"`` or ``"one-sided"``.

    Returns
    -------
    PairIndex
    """
    _check_sided(sided)
    if n_arms < 2:
        raise ValueError("need at least two arms")
    if not (1 <= i <= n_arms and 1 <= j <= n_arms):
        raise ValueError(f"arm labels must lie in 1..{n_arms}, got ({i}, {j})")
    if i == j:
        raise ValueError("a comparison needs two distinct arms")
    if sided == TWO_SIDED:
        if i > j:
            raise ValueError("two-sided comparisons are labelled with i < j")
        k = (i - 1) * n_arms - i * (i - 1) // 2 + (j - i)
        return PairIndex(k, i, j)
    lo, hi = (i, j) if i < j else (j, i)
    base = (lo - 1) * n_arms - lo * (lo - 1) // 2 + (hi - lo)
    if i < j:
        return PairIndex(base, i, j)
    return PairIndex(base + n_arms * (n_arms - 1) // 2, i, j)


def index_to_pair(k: int, n_arms: int, sided: str = TWO_SIDED) -> PairIndex:
    """Inverse of :func:`pair_to_index`."""
    _check_sided(sided)
    m2 = n_arms * (n_arms - 1) // 2
    m = n_comparisons(n_arms, sided)
    if not (1 <= k <= m):
        raise ValueError(f"index must lie in 1..{m}, got {k}")
    base, flipped = (k, False) if k <= m2 else (k - m2, True)
    i = 1
    offset = base
    while offset > n_arms - i:
        offset -= n_arms - i
        i += 1
    j = i + offset
    if flipped:
        i, j = j, i
    return PairIndex(k, i, j)


def all_pairs(n_arms: int, sided: str = TWO_SIDED) -> list[PairIndex]:
    """All comparisons in index order."""
    return [index_to_pair(k, n_arms, sided) for k in range(1, n_comparisons(n_arms, sided) + 1)]


@dataclass(frozen=True)
class TrialConfig:
    """Immutable description of a (possibly multi-stage) K-arm trial.

    Parameters
    ----------
    n_arms : int
        Number of arms K >= 2.
    sigma2 : tuple of float
        Known per-arm response variances, all positive.
    alloc : tuple of float
        Allocation fractions, positive and summing to one.
    stage_n : tuple of tuple of int
        Cumulative per-arm sample sizes, one row per analysis.  Rows are
        strictly increasing componentwise and keep the allocation fractions
        constant over stages (the joint distribution across analyses relies
        on this).
    sided : str
        ``"two-sided"`` (default) or ``"one-sided"``.
    """

    n_arms: int
    sigma2: tuple[float, ...]
    alloc: tuple[float, ...]
    stage_n: tuple[tuple[int, ...], ...]
    sided: str = TWO_SIDED

    def __post_init__(self) -> None:
        _check_sided(self.sided)
        if self.n_arms < 2:
            raise ValueError("need at least two arms")
        object.__setattr__(self, "sigma2", tuple(float(v) for v in self.sigma2))
        object.__setattr__(self, "alloc", tuple(float(r) for r in self.alloc))
        object.__setattr__(
            self, "stage_n", tuple(tuple(int(n) for n in row) for row in self.stage_n)
        )
        if len(self.sigma2) != self.n_arms:
            raise ValueError("sigma2 must have one entry per arm")
        if any(v <= 0 or not math.isfinite(v) for v in self.sigma2):
            raise ValueError("arm variances must be positive and finite")
        if len(self.alloc) != self.n_arms:
            raise ValueError("alloc must have one entry per arm")
        if any(r <= 0 for r in self.alloc):
            raise ValueError("allocation fractions must be positive")
        if abs(sum(self.alloc) - 1.0) > 1e-9:
            raise ValueError("allocation fractions must sum to one")
        if not self.stage_n:
            raise ValueError("at least one analysis stage is required")
        for row in self.stage_n:
            if len(row) != self.n_arms:
                raise ValueError("each stage_n row must have one entry per arm")
            if any(n <= 0 for n in row):
                raise ValueError("per-arm sample sizes must be positive")
        for prev, cur in zip(self.stage_n, self.stage_n[1:]):
            if any(c <= p for p, c in zip(prev, cur)):
                raise ValueError("cumulative sample sizes must be strictly increasing")
        # Constant allocation over stages; a drifting fraction breaks the
        # sqrt(information ratio) covariance between analyses.
        first = self.stage_n[0]
        tot0 = sum(first)
        for row in self.stage_n[1:]:
            tot = sum(row)
            for a, b in zip(first, row):
                if abs(a / tot0 - b / tot) > _PROPORTION_RTOL:
                    raise ValueError(
                        "per-arm allocation fractions must be constant across stages"
                    )

    @classmethod
    def single_stage(
        cls,
        n_arms: int,
        sigma2: Sequence[float] | float,
        n_per_arm: Sequence[int] | int,
        sided: str = TWO_SIDED,
    ) -> "TrialConfig":
        """One-analysis trial; scalar ``sigma2``/``n_per_arm`` broadcast to all arms."""
        if np.isscalar(sigma2):
            sigma2 = (float(sigma2),) * n_arms
        if np.isscalar(n_per_arm):
            n_per_arm = (int(n_per_arm),) * n_arms
        n_row = tuple(int(n) for n in n_per_arm)
        total = sum(n_row)
        alloc = tuple(n / total for n in n_row)
        return cls(n_arms, tuple(sigma2), alloc, (n_row,), sided)

    @property
    def n_stages(self) -> int:
        return len(self.stage_n)

    @property
    def n_comparisons(self) -> int:
        return n_comparisons(self.n_arms, self.sided)

    def pairs(self) -> list[PairIndex]:
        return all_pairs(self.n_arms, self.sided)

    def arm_variances(self, stage: int = 1) -> np.ndarray:
        """Per-arm variance of the cumulative mean at ``stage``: sigma_i^2 / n_i."""
        self._check_stage(stage)
        n = np.asarray(self.stage_n[stage - 1], dtype=float)
        return np.asarray(self.sigma2) / n

    def sigma_p(self, stage: int = 1) -> np.ndarray:
        """Standard error of each pairwise difference at ``stage``."""
        v = self.arm_variances(stage)
        pairs = self.pairs()
        return np.sqrt([v[p.i - 1] + v[p.j - 1] for p in pairs])

    def info_fractions(self) -> np.ndarray:
        """Information fractions t_q = n^(q) / n^(Q) of the analysis schedule."""
        totals = np.array([sum(row) for row in self.stage_n], dtype=float)
        return totals / totals[-1]

    def stage_increments(self) -> np.ndarray:
        """Per-stage (non-cumulative) per-arm sample sizes, shape (Q, K)."""
        cum = np.asarray(self.stage_n, dtype=float)
        out = np.diff(cum, axis=0, prepend=np.zeros((1, self.n_arms)))
        return out

    def with_stage_n(self, stage_n: Sequence[Sequence[int]]) -> "TrialConfig":
        return TrialConfig(self.n_arms, self.sigma2, self.alloc,
                           tuple(tuple(row) for row in stage_n), self.sided)

    def _check_stage(self, stage: int) -> None:
        if not (1 <= stage <= self.n_stages):
            raise ValueError(f"stage must lie in 1..{self.n_stages}, got {stage}")

    def to_dict(self) -> dict:
        return {
            "n_arms": self.n_arms,
            "sigma2": list(self.sigma2),
            "alloc": list(self.alloc),
            "stage_n": [list(row) for row in self.stage_n],
            "sided": self.sided,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, payload: dict) -> "TrialConfig":
        try:
            return cls(
                n_arms=int(payload["n_arms"]),
                sigma2=tuple(payload["sigma2"]),
                alloc=tuple(payload["alloc"]),
                stage_n=tuple(tuple(row) for row in payload["stage_n"]),
                sided=payload.get("sided", TWO_SIDED),
            )
        except KeyError as missing:
            raise ValueError(f"config is missing required field {missing}") from None

    @classmethod
    def from_json(cls, text: str) -> "TrialConfig":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class ComparisonStats:
    """Standardized statistic for one comparison at one analysis."""

    k: int
    theta_hat: float
    sigma_p: float
    z: float
    stage: int


def z_statistics(
    config: TrialConfig, means: Sequence[float], stage: int = 1
) -> list[ComparisonStats]:
    """Standardized pairwise statistics from cumulative arm means.

    Parameters
    ----------
    config : TrialConfig
    means : sequence of float
        Observed cumulative per-arm means at ``stage``.
    stage : int
        1-based analysis index.

    Returns
    -------
    list of ComparisonStats
        One entry per comparison index; z_k = (mean_i - mean_j) / sigma_p,k.
    """
    config._check_stage(stage)
    mu = np.asarray(means, dtype=float)
    if mu.shape != (config.n_arms,):
        raise ValueError(f"means must have length {config.n_arms}")
    if not np.all(np.isfinite(mu)):
        raise ValueError("arm means must be finite")
    v = config.arm_variances(stage)
    out = []
    for p in config.pairs():
        theta = mu[p.i - 1] - mu[p.j - 1]
        sp = math.sqrt(v[p.i - 1] + v[p.j - 1])
        out.append(ComparisonStats(p.k, theta, sp, theta / sp, stage))
    return out


def standardized_means(
    config: TrialConfig, means: Sequence[float], stage: int | None = None
) -> np.ndarray:
    """Expected value of each z statistic under arm means ``means``.

    Defaults to the final analysis (full information).
    """
    if stage is None:
        stage = config.n_stages
    stats = z_statistics(config, means, stage)
    return np.array([s.z for s in stats])


@dataclass(frozen=True)
class CorrelationModel:
    """Validated correlation matrix of a subset of pairwise statistics."""

    matrix: np.ndarray

    def __post_init__(self) -> None:
        mat = np.asarray(self.matrix, dtype=float)
        object.__setattr__(self, "matrix", mat)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise ValueError("correlation matrix must be square")
        if not np.allclose(mat, mat.T, atol=1e-12):
            raise ValueError("correlation matrix must be symmetric")
        if not np.allclose(np.diag(mat), 1.0, atol=1e-12):
            raise ValueError("correlation matrix must have unit diagonal")
        if np.any(np.abs(mat) > 1 + 1e-12):
            raise ValueError("correlations must lie in [-1, 1]")
        if mat.shape[0] > 1 and np.linalg.eigvalsh(mat)[0] < -1e-10:
            raise ValueError("correlation matrix must be positive semidefinite")

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


def correlation(
    config: TrialConfig, subset: Iterable[int], stage: int = 1
) -> CorrelationModel:
    """Correlation matrix of the statistics in ``subset`` at one analysis.

    Shared arms induce the only dependence.  Writing v_a = sigma_a^2 / n_a,
    the covariance of two differences (mu_i1 - mu_j1) and (mu_i2 - mu_j2) is

        1{i1=i2} v_i1 + 1{j1=j2} v_j1 - 1{i1=j2} v_i1 - 1{j1=i2} v_j1,

    so arms shared on the same side contribute positively and arms shared on
    opposite sides negatively.  Comparisons with four distinct arms are
    uncorrelated.

    Parameters
    ----------
    config : TrialConfig
    subset : iterable of int
        Comparison indices (1-based, ordering preserved).
    stage : int
        Analysis whose cumulative sample sizes set the variances (the result
        does not depend on it under constant allocation).

    Returns
    -------
    CorrelationModel
    """
    members = [int(k) for k in getattr(subset, "members", subset)]
    if not members:
        raise ValueError("subset must contain at least one comparison")
    pairs = [index_to_pair(k, config.n_arms, config.sided) for k in members]
    v = config.arm_variances(stage)
    sp = np.sqrt([v[p.i - 1] + v[p.j - 1] for p in pairs])
    dim = len(members)
    mat = np.eye(dim)
    for a in range(dim):
        for b in range(a + 1, dim):
            pa, pb = pairs[a], pairs[b]
            cov = 0.0
            if pa.i == pb.i:
                cov += v[pa.i - 1]
            if pa.j == pb.j:
                cov += v[pa.j - 1]
            if pa.i == pb.j:
                cov -= v[pa.i - 1]
            if pa.j == pb.i:
                cov -= v[pa.j - 1]
            mat[a, b] = mat[b, a] = cov / (sp[a] * sp[b])
    return CorrelationModel(mat)
