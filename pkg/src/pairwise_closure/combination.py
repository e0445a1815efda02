"""Flexible multi-stage testing through stage-wise p-value combination.

Each analysis stage contributes, for every intersection subset, a p-value
computed from that stage's own observations alone.  Stages recruit disjoint
subjects, so the stage-wise statistics are independent across stages and the
p-values are exactly uniform under the intersection null no matter how the
stage sample sizes were chosen mid-trial.  A pre-specified inverse-normal
combination merges them into one final p-value per subset, and the closed
test rejects a hypothesis when every subset containing it combines below
alpha.  Mid-trial redesign (sample size reestimation in particular) does not
inflate the error rate because the combination weights are fixed before the
first stage.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.special import ndtr, ndtri

from .closure import ClosureDecision, _all_subsets, _class_key, _derived_seed
from .model import TWO_SIDED, TrialConfig, correlation
from .mvn import DEFAULT_ACCURACY, Rectangle, mvn_rect
from .sequential import StageData

_ENUMERATION_LIMIT = 12
# clamp for degenerate p-values so the normal quantile stays finite
_P_FLOOR = 1e-300
_P_CEIL = 1.0 - 1e-16


@dataclass(frozen=True)
class StagePValue:
    """One stage's evidence against one intersection hypothesis."""

    subset: frozenset
    stage: int
    p: float


@dataclass(frozen=True)
class CombinationWeights:
    """Pre-specified inverse-normal weights, normalized to sum of squares one.

    The weights are part of the registered design and must be fixed before
    the first stage is observed; everything downstream treats them as
    constants.
    """

    weights: tuple[float, ...]

    def __post_init__(self) -> None:
        w = tuple(float(v) for v in self.weights)
        if not w:
            raise ValueError("need at least one stage weight")
        if any(not math.isfinite(v) or v <= 0.0 for v in w):
            raise ValueError("stage weights must be positive and finite")
        norm = math.sqrt(sum(v * v for v in w))
        object.__setattr__(self, "weights", tuple(v / norm for v in w))

    @property
    def n_stages(self) -> int:
        return len(self.weights)

    @classmethod
    def equal(cls, n_stages: int) -> "CombinationWeights":
        if n_stages < 1:
            raise ValueError("need at least one stage")
        return cls((1.0,) * n_stages)

    @classmethod
    def from_information(cls, config: TrialConfig) -> "CombinationWeights":
        """Weights proportional to the square root of each planned stage's
        information; with no mid-trial changes this recovers the pooled
        cumulative statistic."""
        inc = config.stage_increments().sum(axis=1)
        return cls(tuple(np.sqrt(inc / inc.sum())))


def _check_members(config: TrialConfig, members: Iterable[int]) -> tuple[int, ...]:
    subset = tuple(sorted({int(k) for k in members}))
    if not subset:
        raise ValueError("a comparison set must not be empty")
    if subset[0] < 1 or subset[-1] > config.n_comparisons:
        raise ValueError(
            f"comparison indices must lie in 1..{config.n_comparisons}"
        )
    return subset


def _observed_max(config: TrialConfig, z_row: Sequence[float], cols: Sequence[int]):
    z = np.asarray(z_row, dtype=float)
    if z.shape != (config.n_comparisons,):
        raise ValueError(
            f"need one stage-wise statistic per comparison "
            f"({config.n_comparisons} values)"
        )
    if not np.all(np.isfinite(z)):
        raise ValueError("statistics must be finite")
    picked = z[list(cols)]
    return np.abs(picked).max() if config.sided == TWO_SIDED else picked.max()


def _singleton_p(z_obs: float, sided: str):
    # exact univariate tails; z_obs is max |Z| (two-sided) or max Z
    if sided == TWO_SIDED:
        return 2.0 * ndtr(-z_obs)
    return ndtr(-z_obs)


def stage_pvalue(
    config: TrialConfig,
    members: Iterable[int],
    z_row: Sequence[float],
    stage: int = 1,
    seed: int = 0,
    accuracy: float = DEFAULT_ACCURACY,
) -> StagePValue:
    """P-value of one intersection hypothesis from one stage's statistics.

    ``z_row`` holds the stage-wise statistics of all comparisons at this
    stage (from the stage's own observations, not the cumulative pool).  The
    subset's statistic is the largest |z| over its members, and the p-value
    is one minus the probability that a null vector with the same
    correlation stays inside the corresponding rectangle.  Uniform under the
    intersection null whatever sample size this stage used.
    """
    subset = _check_members(config, members)
    cols = [k - 1 for k in subset]
    z_obs = float(_observed_max(config, z_row, cols))
    if len(subset) == 1:
        p = _singleton_p(z_obs, config.sided)
    else:
        corr = correlation(config, subset)
        if config.sided == TWO_SIDED:
            rect = Rectangle.centered(max(z_obs, 0.0), len(subset))
        else:
            rect = Rectangle.below(z_obs, len(subset))
        run_seed = _derived_seed(seed, ("stage-p", _class_key(config, subset)))
        p = 1.0 - mvn_rect(0.0, corr, rect, accuracy=accuracy, seed=run_seed).value
    return StagePValue(frozenset(subset), int(stage), float(min(max(p, 0.0), 1.0)))


def _coerce_weights(weights, n_stages: int) -> CombinationWeights:
    if weights is None:
        return CombinationWeights.equal(n_stages)
    if not isinstance(weights, CombinationWeights):
        weights = CombinationWeights(tuple(weights))
    if weights.n_stages != n_stages:
        raise ValueError(
            f"got {n_stages} stage p-values but {weights.n_stages} weights"
        )
    return weights


def combine(pvalues: Sequence, weights=None):
    """Weighted inverse-normal combination of independent stage p-values.

    ``pvalues`` holds one entry per stage: a :class:`StagePValue`, a float,
    or an array of floats (arrays combine elementwise).  Values at or
    outside (0, 1) are clamped to the open interval with a warning.  Returns
    1 - Phi(sum_q w_q Phi^{-1}(1 - p_q)), which is again uniform under the
    null and decreasing in every input.
    """
    if not len(pvalues):
        raise ValueError("need at least one stage p-value")
    raw = [p.p if isinstance(p, StagePValue) else p for p in pvalues]
    weights = _coerce_weights(weights, len(raw))
    arrays = [np.asarray(p, dtype=float) for p in raw]
    if any(np.any(~np.isfinite(a)) for a in arrays):
        raise ValueError("stage p-values must be finite")
    if any(np.any((a <= 0.0) | (a >= 1.0)) for a in arrays):
        warnings.warn(
            "stage p-values at or outside (0, 1) were clamped", RuntimeWarning
        )
        arrays = [np.clip(a, _P_FLOOR, _P_CEIL) for a in arrays]
    score = sum(w * -ndtri(a) for w, a in zip(weights.weights, arrays))
    combined = ndtr(-score)
    return float(combined) if np.ndim(combined) == 0 else combined


def flexible_closed_test(
    data: StageData,
    weights=None,
    alpha: float = 0.05,
    seed: int = 0,
    accuracy: float = DEFAULT_ACCURACY,
) -> ClosureDecision:
    """Closed test on combined stage p-values for all pairwise hypotheses.

    Decisions are made once, after the last executed analysis: every
    intersection subset combines its stage p-values with the pre-specified
    weights and is rejected when the combined value falls below alpha; a
    hypothesis is rejected when all subsets containing it are.  The executed
    number of analyses must match the number of weights.  Stage sizes are
    free to deviate from the original plan between stages; only the weights
    are fixed.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie strictly between 0 and 1")
    config = data.config
    m = config.n_comparisons
    if m > _ENUMERATION_LIMIT:
        raise ValueError(f"full enumeration of 2^{m} - 1 subsets is not supported")
    weights = _coerce_weights(weights, data.n_analyses)
    combined: dict = {}
    for subset in _all_subsets(m):
        stage_ps = [
            stage_pvalue(config, subset, data.z_stage[q], stage=q + 1,
                         seed=seed, accuracy=accuracy)
            for q in range(data.n_analyses)
        ]
        combined[subset] = combine(stage_ps, weights)
    local = {s: p < alpha for s, p in combined.items()}
    rejected = tuple(
        all(local[s] for s in local if k in s) for k in range(1, m + 1)
    )
    return ClosureDecision(
        "dunnett-combination",
        alpha,
        rejected,
        local,
        None,
        meta={"combined_p": combined, "analyses": data.n_analyses},
    )


@dataclass
class TailProbabilityTable:
    """Interpolated stage p-values for bulk simulation.

    For each correlation-equivalence class of subsets the rectangle
    probability G(c) = P(max statistic <= c) is evaluated on a fixed grid
    and bridged by a monotone cubic; ``pvalue`` then maps observed maxima to
    1 - G in vectorized form.  Grid nodes are solved to ``accuracy``, so
    interpolated p-values are good to a few times that; use the exact
    :func:`stage_pvalue` when single evaluations matter more than throughput.
    """

    config: TrialConfig
    seed: int = 0
    accuracy: float = 1e-4
    grid_step: float = 0.05
    _interp: dict = field(default_factory=dict, repr=False)

    def _grid(self) -> np.ndarray:
        lo = 0.0 if self.config.sided == TWO_SIDED else -8.0
        n = int(round((8.0 - lo) / self.grid_step)) + 1
        return np.linspace(lo, 8.0, n)

    def _interpolant(self, subset: tuple[int, ...]):
        key = _class_key(self.config, subset)
        f = self._interp.get(key)
        if f is None:
            corr = correlation(self.config, subset)
            run_seed = _derived_seed(self.seed, ("grid", key))
            grid = self._grid()
            dim = len(subset)
            two_sided = self.config.sided == TWO_SIDED
            vals = np.empty_like(grid)
            for idx, c in enumerate(grid):
                rect = (Rectangle.centered(c, dim) if two_sided
                        else Rectangle.below(c, dim))
                vals[idx] = mvn_rect(
                    0.0, corr, rect, accuracy=self.accuracy, seed=run_seed
                ).value
            vals = np.clip(np.maximum.accumulate(vals), 0.0, 1.0)
            f = PchipInterpolator(grid, vals, extrapolate=False)
            self._interp[key] = f
        return f

    def pvalue(self, members: Iterable[int], z_obs):
        """p-values for observed subset maxima; ``z_obs`` may be an array."""
        subset = _check_members(self.config, members)
        z = np.asarray(z_obs, dtype=float)
        if len(subset) == 1:
            p = _singleton_p(z, self.config.sided)
        else:
            grid = self._grid()
            f = self._interpolant(subset)
            g = f(np.clip(z, grid[0], grid[-1]))
            p = np.clip(1.0 - g, 0.0, 1.0)
        return float(p) if np.ndim(z_obs) == 0 else p


def batch_flexible_test(
    z_stage: np.ndarray,
    config: TrialConfig,
    weights=None,
    alpha: float = 0.05,
    table: TailProbabilityTable | None = None,
) -> np.ndarray:
    """Vectorized :func:`flexible_closed_test` over many replicates.

    ``z_stage`` has shape (replicates, stages, comparisons) of stage-wise
    statistics.  Returns the (replicates, comparisons) boolean rejection
    matrix.  Stage p-values come from ``table`` (built on demand), trading
    the exact rectangle quadrature for interpolation error of a few times
    the table accuracy.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie strictly between 0 and 1")
    z = np.asarray(z_stage, dtype=float)
    if z.ndim != 3 or z.shape[2] != config.n_comparisons:
        raise ValueError(
            f"need statistics of shape (replicates, stages, "
            f"{config.n_comparisons})"
        )
    m = config.n_comparisons
    if m > _ENUMERATION_LIMIT:
        raise ValueError(f"full enumeration of 2^{m} - 1 subsets is not supported")
    n_reps, n_stages, _ = z.shape
    weights = _coerce_weights(weights, n_stages)
    if table is None:
        table = TailProbabilityTable(config)
    stat = np.abs(z) if config.sided == TWO_SIDED else z
    rejected = np.ones((n_reps, m), dtype=bool)
    for subset in _all_subsets(m):
        cols = [k - 1 for k in subset]
        z_obs = stat[:, :, cols].max(axis=2)
        stage_ps = [table.pvalue(subset, z_obs[:, q]) for q in range(n_stages)]
        crossed = combine(stage_ps, weights) < alpha
        for k in subset:
            rejected[:, k - 1] &= crossed
    return rejected
