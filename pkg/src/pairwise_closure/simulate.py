"""Replicated trial simulation and operating characteristics.

Arm means are drawn directly from their sampling distribution (the
sufficient statistics of patient-level data), every requested procedure is
applied to the identical simulated statistics (common random numbers), and
the harness reports the probability of rejecting at least one hypothesis,
the full rejection-count distribution, and, for staged procedures, the mean
total sample size after dropping fully resolved arms.

Randomness comes from a counter-based generator keyed by the master seed, so
replicate r sees the same data no matter how many replicates are requested
or how the work is chunked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import ndtri

from .closure import (
    CriticalValueTable,
    batch_closed_test,
    bonferroni_cut,
    critical_values,
)
from .combination import CombinationWeights, TailProbabilityTable, batch_flexible_test
from .model import TWO_SIDED, TrialConfig
from .mvn import DEFAULT_ACCURACY, NumericsError
from .power import MeanConfig
from .sequential import (
    BoundarySchedule,
    SpendingSchedule,
    batch_gs_test,
    generalised_boundaries,
    gs_boundaries,
)

PROCEDURES = (
    "dunnett",
    "global",
    "bonferroni",
    "unadjusted",
    "gatekeeping",
    "dunnett-gs",
    "dunnett-gs-generalised",
    "combination",
)
_STAGED = ("dunnett-gs", "dunnett-gs-generalised")
_CHUNK = 200_000


@dataclass(frozen=True)
class SimScenario:
    """One simulation setting: a design, true means, and procedures to run."""

    config: TrialConfig
    means: MeanConfig
    procedures: tuple[str, ...]
    replicates: int = 100_000
    seed: int = 0
    spending: SpendingSchedule | None = None
    weights: CombinationWeights | None = None
    alpha: float = 0.05
    accuracy: float = DEFAULT_ACCURACY

    def __post_init__(self) -> None:
        if not isinstance(self.means, MeanConfig):
            object.__setattr__(self, "means", MeanConfig(tuple(self.means)))
        if self.means.n_arms != self.config.n_arms:
            raise ValueError("means must have one entry per arm")
        procedures = tuple(self.procedures)
        object.__setattr__(self, "procedures", procedures)
        if not procedures:
            raise ValueError("need at least one procedure")
        unknown = [t for t in procedures if t not in PROCEDURES]
        if unknown:
            raise ValueError(f"unknown procedures {unknown}; choose from {PROCEDURES}")
        if len(set(procedures)) != len(procedures):
            raise ValueError("procedures must be distinct")
        if self.replicates < 1:
            raise ValueError("need at least one replicate")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie strictly between 0 and 1")
        if any(t in _STAGED for t in procedures) and self.spending is None:
            raise ValueError("staged procedures need a spending schedule")
        if "global" in procedures:
            if self.config.sided != TWO_SIDED or len(set(self.config.sigma2)) != 1:
                raise ValueError(
                    "the global single-step comparator needs a two-sided, "
                    "equal-variance design"
                )
            if any(len(set(row)) != 1 for row in self.config.stage_n):
                raise ValueError(
                    "the global single-step comparator needs equal per-arm "
                    "sample sizes"
                )


@dataclass(frozen=True)
class ProcedureSummary:
    """Operating characteristics of one procedure in one scenario."""

    procedure: str
    any_reject: float
    any_se: float
    per_count: tuple[float, ...]
    per_count_se: tuple[float, ...]
    mean_total_n: float | None = None


@dataclass(frozen=True)
class OperatingCharacteristics:
    """Per-procedure summaries from a common-random-numbers run."""

    scenario: SimScenario
    procedures: dict[str, ProcedureSummary]
    decisions: dict[str, np.ndarray] | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        for summary in self.procedures.values():
            total = sum(summary.per_count)
            if abs(total - 1.0) > 1e-9:
                raise ValueError(
                    f"{summary.procedure}: rejection counts sum to {total}"
                )
            if any(not 0.0 <= p <= 1.0 for p in summary.per_count):
                raise ValueError("probabilities must lie in [0, 1]")
            if abs(summary.any_reject - (1.0 - summary.per_count[0])) > 1e-9:
                raise ValueError("any_reject must complement the zero count")

    def summary(self, procedure: str) -> ProcedureSummary:
        return self.procedures[procedure]


def simulate_statistics(
    config: TrialConfig,
    means: Sequence[float] | MeanConfig,
    replicates: int,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative and stage-wise statistics for simulated trials.

    Returns ``(z_cum, z_stage)``, each of shape (replicates, stages,
    comparisons).  The first r replicates are identical for any larger
    replicate count with the same seed.
    """
    mu = means.mu if isinstance(means, MeanConfig) else tuple(means)
    if len(mu) != config.n_arms:
        raise ValueError("means must have one entry per arm")
    if replicates < 1:
        raise ValueError("need at least one replicate")
    rng = np.random.Generator(np.random.Philox(key=seed))
    return _draw_statistics(config, mu, replicates, rng)


def _draw_statistics(config, mu, n_reps, rng):
    inc = config.stage_increments()
    sig2 = np.asarray(config.sigma2)
    sums = rng.standard_normal((n_reps, config.n_stages, config.n_arms))
    sums *= np.sqrt(sig2 * inc)
    sums += np.asarray(mu) * inc
    cum_means = np.cumsum(sums, axis=1) / np.asarray(config.stage_n, dtype=float)
    stage_means = sums / inc
    pairs = config.pairs()
    ii = np.array([p.i - 1 for p in pairs])
    jj = np.array([p.j - 1 for p in pairs])
    se_cum = np.array(
        [config.sigma_p(q) for q in range(1, config.n_stages + 1)]
    )
    v_stage = sig2 / inc
    se_stage = np.sqrt(v_stage[:, ii] + v_stage[:, jj])
    z_cum = (cum_means[:, :, ii] - cum_means[:, :, jj]) / se_cum
    z_stage = (stage_means[:, :, ii] - stage_means[:, :, jj]) / se_stage
    return z_cum, z_stage


@dataclass
class _Resources:
    """Tables and boundaries shared by every replicate of a scenario."""

    table: CriticalValueTable | None = None
    c_full: float | None = None
    cut_bonferroni: float | None = None
    cut_unadjusted: float | None = None
    bounds: BoundarySchedule | None = None
    gen_bounds: BoundarySchedule | None = None
    weights: CombinationWeights | None = None
    tail_table: TailProbabilityTable | None = None


def _build_resources(scenario: SimScenario) -> _Resources:
    cfg = scenario.config
    alpha = scenario.alpha
    m = cfg.n_comparisons
    res = _Resources()
    tags = scenario.procedures
    if "dunnett" in tags or "global" in tags:
        res.table = critical_values(
            cfg, alpha, seed=scenario.seed, accuracy=scenario.accuracy
        )
        res.table.entries()
    if "global" in tags:
        res.c_full = res.table.value(res.table.full_set())
    if "bonferroni" in tags:
        res.cut_bonferroni = (
            bonferroni_cut(alpha, m)
            if cfg.sided == TWO_SIDED
            else float(ndtri(1.0 - alpha / m))
        )
    if "unadjusted" in tags or "gatekeeping" in tags:
        res.cut_unadjusted = float(
            ndtri(1.0 - alpha / 2.0) if cfg.sided == TWO_SIDED else ndtri(1.0 - alpha)
        )
    if "dunnett-gs" in tags:
        res.bounds = gs_boundaries(
            cfg, scenario.spending, seed=scenario.seed, accuracy=scenario.accuracy
        )
        res.bounds.entries()
    if "dunnett-gs-generalised" in tags:
        res.gen_bounds = generalised_boundaries(
            cfg, scenario.spending, seed=scenario.seed, accuracy=scenario.accuracy
        )
    if "combination" in tags:
        res.weights = scenario.weights or CombinationWeights.from_information(cfg)
        res.tail_table = TailProbabilityTable(cfg, seed=scenario.seed)
    return res


def _apply_procedure(tag, scenario, res, z_cum, z_stage):
    """Rejection matrix (replicates, m) and stopping stages (staged only)."""
    cfg = scenario.config
    final = z_cum[:, -1, :]
    stat = np.abs(final) if cfg.sided == TWO_SIDED else final
    if tag == "dunnett":
        return batch_closed_test(stat, res.table), None
    if tag == "global":
        return stat > res.c_full, None
    if tag == "bonferroni":
        return stat > res.cut_bonferroni, None
    if tag == "unadjusted":
        return stat > res.cut_unadjusted, None
    if tag == "gatekeeping":
        # fixed natural order: a comparison is rejected when it and all its
        # predecessors clear the unadjusted cut
        return np.logical_and.accumulate(stat > res.cut_unadjusted, axis=1), None
    if tag == "dunnett-gs":
        return batch_gs_test(z_cum, res.bounds)
    if tag == "dunnett-gs-generalised":
        return batch_gs_test(z_cum, res.gen_bounds)
    if tag == "combination":
        rejected = batch_flexible_test(
            z_stage, cfg, res.weights, scenario.alpha, table=res.tail_table
        )
        return rejected, None
    raise ValueError(f"unknown procedure {tag!r}")


def _total_sample_size(config, rejected, stopped):
    """Per-replicate total enrolment when fully resolved arms stop recruiting.

    An arm is dropped once every pairwise hypothesis involving it is
    rejected (either direction for one-sided families); it then keeps the
    enrolment of the analysis that resolved it.
    """
    n_reps = rejected.shape[0]
    n_stages = config.n_stages
    stage_n = np.asarray(config.stage_n, dtype=float)
    pair_cols: dict[frozenset, list[int]] = {}
    for p in config.pairs():
        pair_cols.setdefault(frozenset((p.i, p.j)), []).append(p.k - 1)
    total = np.zeros(n_reps)
    never = n_stages + 1
    for arm in range(1, config.n_arms + 1):
        drop_stage = np.zeros(n_reps, dtype=np.int64)
        resolved = np.ones(n_reps, dtype=bool)
        for pair, cols in pair_cols.items():
            if arm not in pair:
                continue
            hit = rejected[:, cols]
            # the pair resolves at the earliest rejecting direction
            stage = np.where(hit, stopped[:, cols], never).min(axis=1)
            resolved &= hit.any(axis=1)
            np.maximum(drop_stage, stage, out=drop_stage)
        drop_stage = np.where(resolved, np.minimum(drop_stage, n_stages), n_stages)
        total += stage_n[drop_stage - 1, arm - 1]
    return total


def run_scenario(
    scenario: SimScenario, keep_decisions: bool = False
) -> OperatingCharacteristics:
    """Apply every procedure of the scenario to common simulated trials.

    Deterministic for a fixed scenario: the master seed drives both the
    simulated data and the quadrature used for tables and boundaries.  With
    ``keep_decisions`` the per-replicate rejection matrices are attached to
    the result (memory scales with replicates).
    """
    cfg = scenario.config
    m = cfg.n_comparisons
    resources = _build_resources(scenario)
    rng = np.random.Generator(np.random.Philox(key=scenario.seed))
    hist = {tag: np.zeros(m + 1, dtype=np.int64) for tag in scenario.procedures}
    n_sum = {tag: 0.0 for tag in _STAGED if tag in scenario.procedures}
    kept: dict[str, list] = {tag: [] for tag in scenario.procedures}
    done = 0
    while done < scenario.replicates:
        take = min(_CHUNK, scenario.replicates - done)
        z_cum, z_stage = _draw_statistics(cfg, scenario.means.mu, take, rng)
        for tag in scenario.procedures:
            try:
                rejected, stopped = _apply_procedure(
                    tag, scenario, resources, z_cum, z_stage
                )
            except NumericsError as err:
                raise NumericsError(
                    f"{tag} failed on replicates {done + 1}..{done + take}: {err}"
                ) from err
            hist[tag] += np.bincount(rejected.sum(axis=1), minlength=m + 1)
            if tag in n_sum:
                n_sum[tag] += _total_sample_size(cfg, rejected, stopped).sum()
            if keep_decisions:
                kept[tag].append(rejected)
        done += take
    reps = scenario.replicates
    summaries = {}
    for tag in scenario.procedures:
        per_count = hist[tag] / reps
        se = np.sqrt(per_count * (1.0 - per_count) / reps)
        any_reject = 1.0 - per_count[0]
        summaries[tag] = ProcedureSummary(
            procedure=tag,
            any_reject=float(any_reject),
            any_se=float(math.sqrt(any_reject * (1.0 - any_reject) / reps)),
            per_count=tuple(float(p) for p in per_count),
            per_count_se=tuple(float(s) for s in se),
            mean_total_n=(n_sum[tag] / reps) if tag in n_sum else None,
        )
    decisions = None
    if keep_decisions:
        decisions = {tag: np.concatenate(rows, axis=0) for tag, rows in kept.items()}
    return OperatingCharacteristics(scenario, summaries, decisions)


# Reference four-arm comparison: alpha 0.05, 90% power at a standardized
# difference of 0.3743, 809 patients per arm.  The response scale is
# calibrated so that the (10, 5, 5, 0) scenario rejects at least one
# hypothesis with probability 0.78, which pins the largest standardized
# pairwise noncentrality at 3.221873 and hence sigma below.
TABLE1_N_PER_ARM = 809
TABLE1_U = 3.221873
TABLE1_SIGMA = 10.0 / (TABLE1_U * math.sqrt(2.0 / TABLE1_N_PER_ARM))
TABLE1_MEANS = ((0.0, 0.0, 0.0, 0.0), (10.0, 5.0, 5.0, 0.0), (10.0, 10.0, 0.0, 0.0))
_TABLE1_LABELS = {
    "dunnett": "Dunnett",
    "global": "Global",
    "bonferroni": "Bonferroni",
    "unadjusted": "Unadjusted",
}


def table1_rows(seed: int = 0, replicates: int = 100_000) -> list[dict]:
    """Operating characteristics of the reference four-arm scenarios.

    One dict per (mean vector, procedure) pair with the probability of at
    least one rejection, the distribution of rejection counts (r = 1..6),
    and Monte Carlo standard errors.  The null row also carries the
    unadjusted comparator.
    """
    config = TrialConfig.single_stage(4, TABLE1_SIGMA**2, TABLE1_N_PER_ARM)
    rows = []
    for means in TABLE1_MEANS:
        procedures = ["dunnett", "global", "bonferroni"]
        if not any(means):
            procedures.append("unadjusted")
        scenario = SimScenario(
            config=config,
            means=MeanConfig(means),
            procedures=tuple(procedures),
            replicates=replicates,
            seed=seed,
        )
        result = run_scenario(scenario)
        for tag in procedures:
            s = result.summary(tag)
            rows.append(
                {
                    "means": means,
                    "procedure": tag,
                    "any_reject": s.any_reject,
                    "any_se": s.any_se,
                    "counts": s.per_count[1:],
                    "counts_se": s.per_count_se[1:],
                }
            )
    return rows


def table1_report(seed: int = 0, replicates: int = 100_000) -> str:
    """Formatted text table of :func:`table1_rows`."""
    rows = table1_rows(seed=seed, replicates=replicates)
    header = (
        f"{'mu':>14}  {'Test':<10}  {'>=1':>5}"
        + "".join(f"  {r:>5}" for r in range(1, 7))
        + f"  {'SE(>=1)':>8}"
    )
    lines = [header, "-" * len(header)]
    previous = None
    for row in rows:
        if previous is not None and row["means"] != previous:
            lines.append("")
        previous = row["means"]
        mu = "(" + ",".join(f"{v:g}" for v in row["means"]) + ")"
        lines.append(
            f"{mu:>14}  {_TABLE1_LABELS[row['procedure']]:<10}  "
            f"{row['any_reject']:>5.2f}"
            + "".join(f"  {p:>5.2f}" for p in row["counts"])
            + f"  {row['any_se']:>8.4f}"
        )
    return "\n".join(lines)
