"""Staged constrained optimization for prioritized multi-task objectives.

Tasks are optimized strictly in priority order: the first unconstrained,
each later one subject to keeping every earlier task's achieved loss
(plus an optional tolerance). The package also ships the weighted-sum
grid-search baseline this replaces, brute-force duality verification for
the underlying min-max theory, and a reproducible experiment harness.
"""

from .analysis import (
    ConvexityReport,
    DualityReport,
    PerturbationGrid,
    ThetaGrid,
    build_perturbation_grid,
    check_midpoint_convexity,
    check_slater,
    default_lambda_axis,
    default_theta_grid,
    duality_gap,
    perturbation_function,
)
from .baselines import (
    FrontierPoint,
    WeightGrid,
    default_two_task_grid,
    grid_search,
    task_metric,
    weighted_sum_objective,
)
from .config import (
    ExperimentConfig,
    build_dataset,
    build_problem,
    build_theta0,
    config_hash,
    load_config,
    loads_config,
    parse_config,
    to_toml_str,
)
from .errors import (
    ConfigurationError,
    ContractViolationError,
    DivergenceError,
    UndefinedMetricError,
    UnsupportedScaleError,
)
from .harness import CompareReport, compare_sweep, run_dir_for, run_experiment
from .metrics import RunTrace, auc, trace_summarize
from .objectives import (
    Dataset,
    GenerationConfig,
    PairSpec,
    QuadraticSpec,
    TaskObjective,
    generate_synthetic,
    make_logistic,
    make_pairwise_ranking,
    make_quadratic,
    make_shared_trunk_model,
    parameter_vector,
)
from .optimizer import (
    MultiplierState,
    OptimizerConfig,
    PriorityProblem,
    StageResult,
    multiplier_step,
    nmt_optimize,
    nmt_stage,
    optimize_primary,
    rescaled_loss,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
