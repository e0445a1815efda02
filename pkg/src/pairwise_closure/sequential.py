"""Group-sequential boundaries and multi-stage closed testing.

Every intersection hypothesis gets its own vector of stage boundaries,
calibrated by an error-spending schedule: at analysis q the cumulative
probability (under the intersection null) of having crossed at any analysis
up to q equals the spent error alpha*(tau_q).  The crossing probabilities
are rectangle probabilities of the jointly normal cumulative statistics
across stages, whose covariance factorizes as the single-stage correlation
times sqrt(t_min/t_max) in the information fractions; that joint form
replaces the equivalent stage-conditioning integral and is what the
quadrature kernel consumes directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtr, ndtri

from .closure import ClosureDecision, _all_subsets, _class_key, _derived_seed
from .model import (
    ONE_SIDED,
    TWO_SIDED,
    CorrelationModel,
    TrialConfig,
    correlation,
    z_statistics,
)
from .mvn import (
    DEFAULT_ACCURACY,
    DEFAULT_QUANTILE_TOL,
    Rectangle,
    SolverError,
    mvn_rect,
)

_LATTICE_LIMIT = 12
_SPEND_FLOOR = 1e-6


def _check_info_times(info_times: Sequence[float]) -> tuple[float, ...]:
    times = tuple(float(t) for t in info_times)
    if not times:
        raise ValueError("need at least one analysis time")
    if any(not 0.0 < t <= 1.0 for t in times):
        raise ValueError("information times must lie in (0, 1]")
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError("information times must be strictly increasing")
    if abs(times[-1] - 1.0) > 1e-9:
        raise ValueError("the final information time must equal 1")
    return times[:-1] + (1.0,)


@dataclass(frozen=True)
class SpendingSchedule:
    """Cumulative error spend at each analysis.

    ``per_stage[q-1]`` is alpha*(tau_q), the total error available through
    analysis q; the final entry is the overall alpha.  Build one with the
    named constructors or supply the cumulative spends directly.
    """

    info_times: tuple[float, ...]
    per_stage: tuple[float, ...]
    name: str = "custom"

    def __post_init__(self) -> None:
        times = _check_info_times(self.info_times)
        object.__setattr__(self, "info_times", times)
        spends = tuple(float(a) for a in self.per_stage)
        object.__setattr__(self, "per_stage", spends)
        if len(spends) != len(times):
            raise ValueError("need one cumulative spend per analysis")
        if any(not 0.0 <= a < 1.0 for a in spends):
            raise ValueError("cumulative spends must lie in [0, 1)")
        if any(b < a for a, b in zip(spends, spends[1:])):
            raise ValueError("cumulative spends must be nondecreasing")
        if spends[-1] <= 0.0:
            raise ValueError("the total spend must be positive")

    @property
    def alpha(self) -> float:
        return self.per_stage[-1]

    @property
    def n_stages(self) -> int:
        return len(self.info_times)

    def increments(self) -> tuple[float, ...]:
        prev = 0.0
        out = []
        for a in self.per_stage:
            out.append(a - prev)
            prev = a
        return tuple(out)

    def scaled(self, factor: float) -> "SpendingSchedule":
        """Same shape, total spend multiplied by ``factor``."""
        if not 0.0 < factor * self.alpha < 1.0:
            raise ValueError("scaled total spend must lie in (0, 1)")
        return SpendingSchedule(
            self.info_times,
            tuple(a * factor for a in self.per_stage),
            name=f"{self.name}*{factor:g}",
        )

    @classmethod
    def from_function(
        cls, fn: Callable[[float], float], info_times: Sequence[float], name="custom"
    ) -> "SpendingSchedule":
        times = _check_info_times(info_times)
        return cls(times, tuple(fn(t) for t in times), name=name)

    @classmethod
    def obrien_fleming(
        cls, alpha: float, info_times: Sequence[float]
    ) -> "SpendingSchedule":
        """O'Brien-Fleming-type spend: 2(1 - Phi(z_{alpha/2} / sqrt(tau)))."""
        _check_alpha(alpha)
        z = ndtri(1.0 - alpha / 2.0)
        return cls.from_function(
            lambda t: 2.0 * (1.0 - ndtr(z / math.sqrt(t))),
            info_times,
            name="obrien_fleming",
        )

    @classmethod
    def power_family(
        cls, alpha: float, info_times: Sequence[float], rho: float = 1.0
    ) -> "SpendingSchedule":
        """Kim-DeMets power spend alpha * tau^rho."""
        _check_alpha(alpha)
        if rho <= 0:
            raise ValueError("rho must be positive")
        return cls.from_function(
            lambda t: alpha * t**rho, info_times, name=f"power({rho:g})"
        )

    @classmethod
    def pocock(
        cls,
        alpha: float,
        info_times: Sequence[float],
        seed: int = 0,
        accuracy: float = DEFAULT_ACCURACY,
        tol: float = DEFAULT_QUANTILE_TOL,
    ) -> "SpendingSchedule":
        """Implied spend of the constant-boundary (Pocock) design.

        A single constant c is solved so that a standard two-sided reference
        process with these information times crosses +-c by the final
        analysis with probability alpha; the cumulative crossing
        probabilities through each analysis are the spends.  With equal
        information increments this reproduces the classic Pocock
        constants exactly (2.178 for two looks at alpha = 0.05).
        """
        _check_alpha(alpha)
        times = _check_info_times(info_times)
        q = len(times)
        if q == 1:
            return cls(times, (alpha,), name="pocock")
        corr = _reference_corr(times)

        def escape_by(stage: int, c: float) -> float:
            sub = CorrelationModel(corr[: stage, : stage])
            rect = Rectangle.centered(c, stage)
            return 1.0 - mvn_rect(0.0, sub, rect, accuracy=accuracy, seed=seed).value

        c_const = _two_phase_root(
            lambda c, acc: 1.0
            - mvn_rect(
                0.0,
                CorrelationModel(corr),
                Rectangle.centered(c, q),
                accuracy=acc,
                seed=seed,
            ).value
            - alpha,
            0.0,
            8.0,
            tol=tol,
            accuracy=accuracy,
            coarse=max(accuracy, min(5e-4, 0.05 * alpha)),
        )
        spends = [escape_by(stage, c_const) for stage in range(1, q)] + [alpha]
        return cls(times, tuple(spends), name="pocock")


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie strictly between 0 and 1")


def _reference_corr(times: Sequence[float]) -> np.ndarray:
    t = np.asarray(times, dtype=float)
    s = np.sqrt(t)
    return np.minimum.outer(s, s) / np.maximum.outer(s, s)


def _two_phase_root(objective, lo, hi, tol, accuracy, coarse) -> float:
    """Root of a monotone, noisy-but-deterministic objective(c, accuracy)."""
    f_lo = objective(lo, coarse)
    f_hi = objective(hi, coarse)
    if f_lo < 0.0 or f_hi > 0.0:
        raise SolverError(f"failed to bracket the boundary in [{lo}, {hi}]")
    if coarse > accuracy:
        c0 = float(brentq(objective, lo, hi, xtol=5e-3, args=(coarse,)))
        for half in (0.05, 0.5):
            a, b = max(lo, c0 - half), min(hi, c0 + half)
            try:
                return float(brentq(objective, a, b, xtol=0.5 * tol, args=(accuracy,)))
            except ValueError:
                continue
    return float(brentq(objective, lo, hi, xtol=0.5 * tol, args=(accuracy,)))


def joint_covariance(config: TrialConfig, members: Iterable[int] | None = None) -> np.ndarray:
    """Covariance of the cumulative statistics across comparisons and stages.

    Stage-major ordering: entry (q-1)*m + (k-1) is comparison k at analysis
    q.  Equals the single-stage correlation scaled by sqrt(t_min/t_max) in
    the information fractions, which is the independent-increments identity
    for pooled statistics under proportional allocation.
    """
    if members is None:
        members = range(1, config.n_comparisons + 1)
    members = tuple(members)
    base = correlation(config, members).matrix
    t = config.info_fractions()
    return np.kron(_reference_corr(t), base)


def _stage_rect(
    c_by_stage: Sequence[float], widths: int, sided: str
) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Bounds for the joint rectangle, dropping stages with infinite bounds."""
    lower, upper, keep = [], [], []
    for q, c in enumerate(c_by_stage):
        if math.isinf(c):
            continue
        keep.extend(range(q * widths, (q + 1) * widths))
        if sided == TWO_SIDED:
            lower.extend([-c] * widths)
        else:
            lower.extend([-np.inf] * widths)
        upper.extend([c] * widths)
    return np.asarray(lower), np.asarray(upper), keep


@dataclass
class BoundarySchedule:
    """Stage boundaries for every intersection subset.

    ``value(members)`` returns the Q-vector of critical values for that
    subset, solved lazily and cached per correlation-equivalence class.  A
    generalised schedule carries only the full-set vector and serves it for
    every subset, which is conservative for proper subsets.
    """

    config: TrialConfig
    schedule: SpendingSchedule
    seed: int = 0
    accuracy: float = DEFAULT_ACCURACY
    tol: float = DEFAULT_QUANTILE_TOL
    generalised: bool = False
    _class_values: dict = field(default_factory=dict, repr=False)
    _subset_keys: dict = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if self.schedule.n_stages != self.config.n_stages:
            raise ValueError("schedule and config disagree on the number of analyses")
        times = self.config.info_fractions()
        if np.max(np.abs(times - np.asarray(self.schedule.info_times))) > 1e-6:
            raise ValueError("schedule information times do not match the config")

    @property
    def alpha(self) -> float:
        return self.schedule.alpha

    @property
    def n_comparisons(self) -> int:
        return self.config.n_comparisons

    @property
    def n_stages(self) -> int:
        return self.config.n_stages

    def full_set(self) -> frozenset:
        return frozenset(range(1, self.n_comparisons + 1))

    def _key(self, members: frozenset) -> tuple:
        key = self._subset_keys.get(members)
        if key is None:
            key = _class_key(self.config, tuple(sorted(members)))
            key = (key, self.schedule.info_times,
                   tuple(round(a, 12) for a in self.schedule.per_stage))
            self._subset_keys[members] = key
        return key

    def _solve(self, key, members: tuple[int, ...]) -> tuple[float, ...]:
        base = correlation(self.config, members).matrix
        width = len(members)
        times = self.config.info_fractions()
        seed = _derived_seed(self.seed, key)
        spends = self.schedule.per_stage
        sided = self.config.sided
        tail_lo = 0.0 if sided == TWO_SIDED else -8.0
        values: list[float] = []
        prev = 0.0
        for q, alpha_q in enumerate(spends, start=1):
            if alpha_q - prev < _SPEND_FLOOR:
                values.append(math.inf)
                continue
            prev = alpha_q
            joint = CorrelationModel(np.kron(_reference_corr(times[:q]), base))

            def objective(c: float, acc: float) -> float:
                lower, upper, keep = _stage_rect(values + [c], width, sided)
                sub = CorrelationModel(joint.matrix[np.ix_(keep, keep)])
                rect = Rectangle(lower, upper)
                prob = mvn_rect(0.0, sub, rect, accuracy=acc, seed=seed).value
                return (1.0 - prob) - alpha_q

            coarse = max(self.accuracy, min(5e-4, 0.05 * max(alpha_q, 1e-3)))
            values.append(
                _two_phase_root(
                    objective, tail_lo, 8.0,
                    tol=self.tol, accuracy=self.accuracy, coarse=coarse,
                )
            )
        return tuple(values)

    def value(self, members: Iterable[int]) -> tuple[float, ...]:
        subset = frozenset(int(k) for k in members)
        if not subset:
            raise ValueError("a comparison set must not be empty")
        if min(subset) < 1 or max(subset) > self.n_comparisons:
            raise ValueError(f"comparison indices must lie in 1..{self.n_comparisons}")
        if self.generalised:
            subset = self.full_set()
        key = self._key(subset)
        if key not in self._class_values:
            self._class_values[key] = self._solve(key, tuple(sorted(subset)))
        return self._class_values[key]

    def entries(self) -> dict:
        m = self.n_comparisons
        if m > _LATTICE_LIMIT:
            raise ValueError(
                f"full enumeration of 2^{m} - 1 subsets is not supported"
            )
        return {s: self.value(s) for s in _all_subsets(m)}


def gs_boundaries(
    config: TrialConfig,
    schedule: SpendingSchedule,
    seed: int = 0,
    accuracy: float = DEFAULT_ACCURACY,
    tol: float = DEFAULT_QUANTILE_TOL,
) -> BoundarySchedule:
    """Per-subset stage boundaries calibrated to the spending schedule."""
    return BoundarySchedule(config, schedule, seed, accuracy, tol)


def generalised_boundaries(
    config: TrialConfig,
    schedule: SpendingSchedule,
    seed: int = 0,
    accuracy: float = DEFAULT_ACCURACY,
    tol: float = DEFAULT_QUANTILE_TOL,
) -> BoundarySchedule:
    """Full-set boundary vector only, applied to every hypothesis."""
    return BoundarySchedule(config, schedule, seed, accuracy, tol, generalised=True)


@dataclass(frozen=True)
class StageData:
    """Observed statistics through the analyses conducted so far.

    ``z_cum[q-1, k-1]`` is the cumulative statistic for comparison k at
    analysis q; ``z_stage`` holds the stage-wise statistics from each
    stage's new observations alone.  The cumulative row q is the
    information-weighted combination of stage rows 1..q.
    """

    config: TrialConfig
    z_cum: np.ndarray
    z_stage: np.ndarray

    def __post_init__(self) -> None:
        z_cum = np.atleast_2d(np.asarray(self.z_cum, dtype=float))
        z_stage = np.atleast_2d(np.asarray(self.z_stage, dtype=float))
        object.__setattr__(self, "z_cum", z_cum)
        object.__setattr__(self, "z_stage", z_stage)
        m = self.config.n_comparisons
        if z_cum.shape != z_stage.shape or z_cum.ndim != 2 or z_cum.shape[1] != m:
            raise ValueError(f"statistic arrays must have shape (q, {m})")
        if not 1 <= z_cum.shape[0] <= self.config.n_stages:
            raise ValueError("number of analyses exceeds the planned schedule")
        if not (np.all(np.isfinite(z_cum)) and np.all(np.isfinite(z_stage))):
            raise ValueError("statistics must be finite")

    @property
    def n_analyses(self) -> int:
        return self.z_cum.shape[0]

    @classmethod
    def from_cumulative_means(
        cls, config: TrialConfig, cum_means: Sequence[Sequence[float]]
    ) -> "StageData":
        """Build from cumulative per-arm means observed at each analysis."""
        cum = np.atleast_2d(np.asarray(cum_means, dtype=float))
        q_obs = cum.shape[0]
        if cum.shape != (q_obs, config.n_arms) or q_obs > config.n_stages:
            raise ValueError(
                f"cumulative means must have shape (q <= {config.n_stages}, "
                f"{config.n_arms})"
            )
        z_cum = np.array(
            [[s.z for s in z_statistics(config, cum[q], stage=q + 1)]
             for q in range(q_obs)]
        )
        # stage-wise means from the cumulative ones, then standardize by the
        # increment sizes
        inc = config.stage_increments()[:q_obs]
        cum_n = np.asarray(config.stage_n[:q_obs], dtype=float)
        stage_means = np.empty_like(cum)
        stage_means[0] = cum[0]
        for q in range(1, q_obs):
            stage_means[q] = (cum[q] * cum_n[q] - cum[q - 1] * cum_n[q - 1]) / inc[q]
        sigma2 = np.asarray(config.sigma2)
        pairs = config.pairs()
        z_stage = np.empty((q_obs, config.n_comparisons))
        for q in range(q_obs):
            v = sigma2 / inc[q]
            for col, p in enumerate(pairs):
                theta = stage_means[q, p.i - 1] - stage_means[q, p.j - 1]
                z_stage[q, col] = theta / math.sqrt(v[p.i - 1] + v[p.j - 1])
        return cls(config, z_cum, z_stage)


def stage_weights(config: TrialConfig, upto: int | None = None) -> np.ndarray:
    """Pooling weights w[q, lam] with Z_cum[q] = sum_lam w[q, lam] Z_stage[lam].

    Rows are analyses, columns stages; w[q, lam] = sqrt(n'(lam) / n(q)) for
    lam <= q and 0 above the diagonal.  Valid under proportional allocation,
    where the weight is the same for every comparison.
    """
    q_max = config.n_stages if upto is None else upto
    inc_tot = config.stage_increments().sum(axis=1)[:q_max]
    cum_tot = np.array([sum(row) for row in config.stage_n[:q_max]], dtype=float)
    w = np.zeros((q_max, q_max))
    for q in range(q_max):
        w[q, : q + 1] = np.sqrt(inc_tot[: q + 1] / cum_tot[q])
    return w


def gs_closed_test(data: StageData, boundaries: BoundarySchedule) -> ClosureDecision:
    """Multi-stage closed test of all pairwise hypotheses.

    Each intersection subset is rejected at the first analysis where its
    maximum statistic crosses that analysis's boundary; rejections are
    absorbing.  A hypothesis is globally rejected once every subset
    containing it is rejected, and its ``stopped_stage`` entry records the
    analysis at which that happened.
    """
    if data.config != boundaries.config:
        raise ValueError("data and boundaries disagree on the trial configuration")
    m = boundaries.n_comparisons
    stat = np.abs(data.z_cum) if data.config.sided == TWO_SIDED else data.z_cum
    q_obs = data.n_analyses
    entries = boundaries.entries()
    crossed_at: dict = {}
    for subset, c_vec in entries.items():
        cols = [k - 1 for k in subset]
        stage = None
        for q in range(q_obs):
            if stat[q, cols].max() > c_vec[q]:
                stage = q + 1
                break
        crossed_at[subset] = stage
    rejected = []
    stopped = []
    for k in range(1, m + 1):
        stages = [crossed_at[s] for s in entries if k in s]
        if all(s is not None for s in stages):
            rejected.append(True)
            stopped.append(max(stages))
        else:
            rejected.append(False)
            stopped.append(None)
    local = {s: q is not None for s, q in crossed_at.items()}
    name = "dunnett-gs-generalised" if boundaries.generalised else "dunnett-gs"
    return ClosureDecision(
        name,
        boundaries.alpha,
        tuple(rejected),
        local,
        tuple(stopped),
        meta={"analyses": q_obs, "crossed_at": crossed_at},
    )


def batch_gs_test(
    z_cum: np.ndarray, boundaries: BoundarySchedule
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`gs_closed_test` over many replicates.

    ``z_cum`` has shape (replicates, analyses, comparisons) of cumulative
    statistics.  Returns ``(rejected, stopped)``: a boolean rejection matrix
    and an integer matrix of the analyses at which each rejection completed
    (0 where not rejected).
    """
    z = np.asarray(z_cum, dtype=float)
    config = boundaries.config
    m = boundaries.n_comparisons
    if z.ndim != 3 or z.shape[2] != m:
        raise ValueError(
            f"need statistics of shape (replicates, analyses, {m})"
        )
    if not 1 <= z.shape[1] <= config.n_stages:
        raise ValueError("number of analyses exceeds the planned schedule")
    q_obs = z.shape[1]
    stat = np.abs(z) if config.sided == TWO_SIDED else z
    n_reps = z.shape[0]
    rejected = np.ones((n_reps, m), dtype=bool)
    stopped = np.zeros((n_reps, m), dtype=np.int64)
    for subset, c_vec in boundaries.entries().items():
        cols = [k - 1 for k in subset]
        hits = stat[:, :, cols].max(axis=2) > np.asarray(c_vec[:q_obs])
        crossed = hits.any(axis=1)
        first = np.where(crossed, hits.argmax(axis=1) + 1, 0)
        for col in cols:
            rejected[:, col] &= crossed
            np.maximum(stopped[:, col], first, out=stopped[:, col])
    stopped[~rejected] = 0
    return rejected, stopped


def drop_treatments(decision: ClosureDecision, config: TrialConfig) -> set[int]:
    """Arms whose every pairwise hypothesis has been globally rejected.

    For one-sided families a pair counts as resolved when either direction
    is rejected (both can never be).
    """
    rejected_pairs = set()
    for p in config.pairs():
        if decision.rejected[p.k - 1]:
            rejected_pairs.add(frozenset((p.i, p.j)))
    eligible = set()
    for arm in range(1, config.n_arms + 1):
        others = [frozenset((arm, j)) for j in range(1, config.n_arms + 1) if j != arm]
        if all(pair in rejected_pairs for pair in others):
            eligible.add(arm)
    return eligible
