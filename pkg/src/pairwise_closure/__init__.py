"""All-pairwise comparison of multi-arm experiments under family-wise error
control: closed testing, group-sequential and combination-test extensions,
power and sample size, and a simulation harness."""

from .closure import (
    ClosureDecision,
    CriticalValueTable,
    batch_closed_test,
    bonferroni_cut,
    bonferroni_test,
    closed_test,
    critical_values,
    gatekeeping_test,
    one_sided_closed_test,
    tukey_global_test,
    unadjusted_test,
)
from .model import (
    ONE_SIDED,
    TWO_SIDED,
    ComparisonStats,
    CorrelationModel,
    PairIndex,
    TrialConfig,
    all_pairs,
    correlation,
    index_to_pair,
    n_comparisons,
    pair_to_index,
    standardized_means,
    z_statistics,
)
from .mvn import (
    AccuracyError,
    NumericsError,
    ProbResult,
    Rectangle,
    SolverError,
    equicoord_quantile,
    mvn_rect,
)
from .power import (
    MeanConfig,
    PowerResult,
    SampleSizeResult,
    disjunctive_power,
    lfc,
    lfc_check,
    sample_size,
)
from .combination import (
    CombinationWeights,
    StagePValue,
    TailProbabilityTable,
    batch_flexible_test,
    combine,
    flexible_closed_test,
    stage_pvalue,
)
from .sequential import (
    BoundarySchedule,
    SpendingSchedule,
    StageData,
    batch_gs_test,
    drop_treatments,
    generalised_boundaries,
    gs_boundaries,
    gs_closed_test,
    joint_covariance,
    stage_weights,
)
from .simulate import (
    OperatingCharacteristics,
    ProcedureSummary,
    SimScenario,
    run_scenario,
    simulate_statistics,
    table1_report,
    table1_rows,
)

__version__ = "0.1.0"
