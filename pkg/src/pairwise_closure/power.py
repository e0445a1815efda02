"""Disjunctive power, least favourable configurations, and sample sizing.

The probability of rejecting at least one pairwise null hypothesis equals
the probability that the maximum absolute statistic crosses the full-family
critical value, because the closed procedure rejects something exactly when
it rejects the overall intersection.  That makes disjunctive power a single
rectangle probability under a shifted mean, which is what the quadrature
path computes; the simulation path additionally reports the distribution of
the number of rejections.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .closure import CriticalValueTable, batch_closed_test, critical_values
from .model import ONE_SIDED, TWO_SIDED, TrialConfig, correlation, standardized_means
from .mvn import (
    DEFAULT_ACCURACY,
    DEFAULT_QUANTILE_TOL,
    Rectangle,
    SolverError,
    equicoord_quantile,
    mvn_rect,
)


@dataclass(frozen=True)
class MeanConfig:
    """True per-arm means, in response units.

    ``delta`` optionally records the clinically relevant difference the
    configuration was built around.
    """

    mu: tuple[float, ...]
    delta: float | None = None

    def __post_init__(self) -> None:
        mu = tuple(float(x) for x in self.mu)
        object.__setattr__(self, "mu", mu)
        if len(mu) < 2:
            raise ValueError("need means for at least two arms")
        if not all(math.isfinite(x) for x in mu):
            raise ValueError("arm means must be finite")
        if self.delta is not None and not math.isfinite(self.delta):
            raise ValueError("delta must be finite")

    @property
    def n_arms(self) -> int:
        return len(self.mu)


@dataclass(frozen=True)
class PowerResult:
    """Disjunctive power, plus the rejection-count distribution when simulated.

    ``per_count[r]`` is the probability of exactly r global rejections; it is
    only available from the simulation path.  ``se`` is the Monte Carlo
    standard error of ``disjunctive`` (None for quadrature).
    """

    disjunctive: float
    per_count: tuple[float, ...] | None = None
    se: float | None = None
    n_reps: int | None = None
    method: str = "quadrature"


def lfc(n_arms: int, delta: float) -> MeanConfig:
    """Least favourable configuration for detecting a difference of delta.

    Arm 1 sits at delta, arm 2 at zero, and every remaining arm at the
    midpoint delta/2.  Among all mean vectors with two arms separated by
    delta (and equal variance per arm), this one minimizes the probability
    of rejecting anything.
    """
    if n_arms < 2:
        raise ValueError("need at least two arms")
    if delta == 0 or not math.isfinite(delta):
        raise ValueError("delta must be nonzero and finite")
    return MeanConfig((delta, 0.0) + (delta / 2.0,) * (n_arms - 2), delta=delta)


def _mu(means, n_arms: int) -> np.ndarray:
    vec = np.asarray(means.mu if isinstance(means, MeanConfig) else means, dtype=float)
    if vec.shape != (n_arms,):
        raise ValueError(f"means must have length {n_arms}")
    return vec


def _reject_rect(c: float, m: int, sided: str) -> Rectangle:
    return Rectangle.centered(c, m) if sided == TWO_SIDED else Rectangle.below(c, m)


def disjunctive_power(
    config: TrialConfig,
    means,
    alpha: float = 0.05,
    method: str = "quadrature",
    seed: int = 0,
    accuracy: float = DEFAULT_ACCURACY,
    n_reps: int = 10_000,
    table: CriticalValueTable | None = None,
) -> PowerResult:
    """Probability of rejecting at least one pairwise hypothesis.

    Parameters
    ----------
    config : TrialConfig
        Single-stage design; sample sizes are taken from it.
    means : MeanConfig or sequence of float
        True per-arm means.
    alpha : float
    method : str
        ``"quadrature"`` evaluates one shifted rectangle probability;
        ``"simulation"`` draws replicated trials and also returns the
        distribution of the number of rejections.
    seed : int
    accuracy : float
        Accuracy of the quadrature path.
    n_reps : int
        Replicates for the simulation path.
    table : CriticalValueTable, optional
        Reuse an existing table for this config and alpha.

    Returns
    -------
    PowerResult
    """
    mu = _mu(means, config.n_arms)
    if table is None:
        table = critical_values(config, alpha, seed=seed, accuracy=accuracy)
    elif table.config != config or table.alpha != alpha:
        raise ValueError("table was built for a different config or alpha")
    zeta = standardized_means(config, mu, stage=1)
    m = config.n_comparisons
    c_full = table.value(table.full_set())
    if method == "quadrature":
        prob = mvn_rect(
            zeta,
            correlation(config, range(1, m + 1)),
            _reject_rect(c_full, m, config.sided),
            accuracy=accuracy,
            seed=seed,
        )
        return PowerResult(disjunctive=1.0 - prob.value)
    if method != "simulation":
        raise ValueError(f"unknown method {method!r}")
    rng = np.random.default_rng(seed)
    arm_sd = np.sqrt(config.arm_variances(1))
    pairs = config.pairs()
    ii = np.array([p.i - 1 for p in pairs])
    jj = np.array([p.j - 1 for p in pairs])
    sigma_p = config.sigma_p(1)
    x = mu + rng.standard_normal((n_reps, config.n_arms)) * arm_sd
    z = (x[:, ii] - x[:, jj]) / sigma_p
    stat = np.abs(z) if config.sided == TWO_SIDED else z
    rejected = batch_closed_test(stat, table)
    count = rejected.sum(axis=1)
    per_count = tuple(float(np.mean(count == r)) for r in range(m + 1))
    disjunctive = 1.0 - per_count[0]
    se = math.sqrt(max(disjunctive * (1.0 - disjunctive), 1e-12) / n_reps)
    return PowerResult(disjunctive, per_count, se, n_reps, "simulation")


@dataclass(frozen=True)
class SampleSizeResult:
    """Outcome of the sample-size search."""

    n_total: int
    n_per_arm: tuple[int, ...]
    power: float
    alpha: float
    method: str = "quadrature"


def _arm_sizes(alloc: tuple[float, ...], n_nominal: int) -> tuple[int, ...]:
    return tuple(max(1, math.ceil(r * n_nominal)) for r in alloc)


def sample_size(
    config: TrialConfig,
    means,
    alpha: float = 0.05,
    power_target: float = 0.9,
    seed: int = 0,
    accuracy: float = DEFAULT_ACCURACY,
    n_max: int = 1 << 22,
) -> SampleSizeResult:
    """Smallest sample size whose disjunctive power reaches the target.

    The search bisects on a nominal total n; per-arm sizes are the ceilings
    of the allocation fractions times n, and the reported total is their
    sum.  Power is evaluated by quadrature at each candidate, so the search
    is deterministic.  The allocation ratios and variances come from
    ``config``; its own sample sizes are ignored.

    Raises
    ------
    SolverError
        If the target is unreachable, in particular when all means are
        equal so power cannot exceed alpha.
    """
    if not 0.0 < power_target < 1.0:
        raise ValueError("power_target must lie strictly between 0 and 1")
    mu = _mu(means, config.n_arms)
    if np.ptp(mu) == 0.0:
        raise SolverError(
            "all arm means are equal; disjunctive power cannot exceed alpha"
        )

    crit_cache: dict[bytes, float] = {}

    def power_at(n_nominal: int) -> float:
        arms = _arm_sizes(config.alloc, n_nominal)
        cfg = config.with_stage_n((arms,))
        m = cfg.n_comparisons
        corr = correlation(cfg, range(1, m + 1))
        key = np.round(corr.matrix, 12).tobytes()
        c_full = crit_cache.get(key)
        if c_full is None:
            c_full = equicoord_quantile(
                corr,
                1.0 - alpha,
                seed=seed,
                tol=DEFAULT_QUANTILE_TOL,
                accuracy=accuracy,
                tail="upper" if cfg.sided == ONE_SIDED else "central",
            )
            crit_cache[key] = c_full
        zeta = standardized_means(cfg, mu, stage=1)
        prob = mvn_rect(
            zeta, corr, _reject_rect(c_full, m, cfg.sided), accuracy=accuracy, seed=seed
        )
        return 1.0 - prob.value

    lo = hi = config.n_arms
    while power_at(hi) < power_target:
        lo, hi = hi, hi * 2
        if hi > n_max:
            raise SolverError(
                f"power {power_target} not reachable below n_total = {n_max}"
            )
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if power_at(mid) >= power_target:
            hi = mid
        else:
            lo = mid
    # integer rounding can flatten power locally; confirm minimality
    while hi > config.n_arms and power_at(hi - 1) >= power_target:
        hi -= 1
    arms = _arm_sizes(config.alloc, hi)
    return SampleSizeResult(sum(arms), arms, power_at(hi), alpha)


def lfc_check(
    config: TrialConfig,
    delta: float,
    alpha: float = 0.05,
    grid: Sequence[float] | None = None,
    seed: int = 0,
    accuracy: float = DEFAULT_ACCURACY,
    mode: str = "theorem",
) -> dict:
    """Check that the least favourable configuration minimizes power.

    In ``"theorem"`` mode (which requires equal variance-per-arm), arm 3 is
    perturbed away from the midpoint by each epsilon in ``grid`` and the
    disjunctive power must not fall below the value at the midpoint.  In
    ``"search"`` mode the midpoint arms are optimized freely, with arms 1
    and 2 pinned at delta and zero, and the minimizing per-arm scaling is
    reported; this covers unequal variance-per-arm designs.

    Returns a report dict with the power at the configuration, the
    alternatives examined, and whether the configuration attained the
    minimum.
    """
    k = config.n_arms
    if delta == 0 or not math.isfinite(delta):
        raise ValueError("delta must be nonzero and finite")
    base_means = lfc(k, delta)
    if k == 2:
        # with two arms the configuration is unique up to translation
        return {
            "mode": mode,
            "lfc_power": disjunctive_power(
                config, base_means, alpha, seed=seed, accuracy=accuracy
            ).disjunctive,
            "alternatives": [],
            "is_minimum": True,
            "trivial": True,
        }
    table = critical_values(config, alpha, seed=seed, accuracy=accuracy)
    base = disjunctive_power(
        config, base_means, alpha, seed=seed, accuracy=accuracy, table=table
    ).disjunctive
    slack = 5.0 * accuracy

    if mode == "theorem":
        ratio = config.arm_variances(1)
        if np.ptp(ratio) > 1e-9 * ratio.max():
            raise ValueError(
                "theorem mode requires equal variance per arm; use search mode"
            )
        if grid is None:
            grid = (-delta / 2, -delta / 4, delta / 4, delta / 2)
        grid = [float(e) for e in grid]
        if not grid:
            raise ValueError("perturbation grid is empty")
        alternatives = []
        for eps in grid:
            mu = list(base_means.mu)
            mu[2] = delta / 2.0 + eps
            power = disjunctive_power(
                config, mu, alpha, seed=seed, accuracy=accuracy, table=table
            ).disjunctive
            alternatives.append(
                {"epsilon": eps, "power": power, "ge_lfc": power >= base - slack}
            )
        return {
            "mode": "theorem",
            "lfc_power": base,
            "alternatives": alternatives,
            "is_minimum": all(a["ge_lfc"] for a in alternatives),
            "trivial": False,
        }

    if mode != "search":
        raise ValueError(f"unknown mode {mode!r}")

    def objective(mid: np.ndarray) -> float:
        mu = np.concatenate([[delta, 0.0], mid])
        return disjunctive_power(
            config, mu, alpha, seed=seed, accuracy=accuracy, table=table
        ).disjunctive

    start = np.full(k - 2, delta / 2.0)
    res = minimize(
        objective,
        start,
        method="Nelder-Mead",
        options={"xatol": 1e-3 * abs(delta), "fatol": 1e-6, "maxiter": 400},
    )
    minimizing = np.concatenate([[delta, 0.0], res.x])
    scaling = tuple([1.0, 1.0] + [float(x / (delta / 2.0)) for x in res.x])
    return {
        "mode": "search",
        "lfc_power": base,
        "min_power": float(res.fun),
        "minimizing_means": tuple(float(x) for x in minimizing),
        "scaling": scaling,
        "alternatives": [],
        "is_minimum": base <= res.fun + slack,
        "trivial": False,
    }
