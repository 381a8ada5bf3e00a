"""Hierarchical bootstrap on calculation trees.

A calculation tree evaluates a known function of independent random inputs
through numbered sub-function vertices.  The hierarchical bootstrap
materializes a resampled population at every vertex and estimates the
function's expectation as the mean of the root population.  This package
provides:

- the tree model (parsing, validation, means, exact gradients),
- a first-order analytic model of the estimator's variance as a function of
  the per-vertex sample sizes,
- a dynamic-programming optimizer for those sizes under a linear budget,
  with an exhaustive enumeration oracle for verification,
- a Monte Carlo simulator (wave and sweep estimators) that validates the
  analytic model empirically.
"""

from .errors import (
    DomainError,
    ExpressionSyntaxError,
    InfeasibleError,
    SearchSpaceError,
    TreeBootError,
    TreeDocumentError,
    TreeValidationError,
)
from .expressions import Expr, evaluate, derivative, parse_expression, to_string
from .tree import (
    CalcTree,
    VertexSpec,
    Violation,
    compose_root_expression,
    gradient_at_mean,
    parse_tree,
    parse_tree_file,
    propagate_means,
    serialize_tree,
    tree_gradients,
    validate_tree,
)
from .variance import (
    AllocationPlan,
    MomentState,
    TreeMoments,
    compute_moments,
    estimator_variance,
    leaf_moments,
    leaf_statistics,
    mean_bias_second_order,
    pair_cov_recursion,
    psi_eval,
    sigma2_recursion,
    tree_moments,
)
from .allocate import (
    AlphaGrid,
    BellmanTable,
    OptimizationResult,
    backward_dp_grid,
    brute_force_oracle,
    collapsed_dp,
    forward_recovery,
    random_feasible_sizes,
)
from .simulate import (
    LeafDistribution,
    ReplicationConfig,
    SamplePopulation,
    SimulationReport,
    generate_leaf_population,
    replicate,
    stream_rng,
    summarize_replicates,
    sweep_run,
    wave_populations,
    wave_run,
)

__version__ = "0.1.0"

__all__ = [
    "TreeBootError",
    "ExpressionSyntaxError",
    "DomainError",
    "TreeDocumentError",
    "TreeValidationError",
    "InfeasibleError",
    "SearchSpaceError",
    "Expr",
    "parse_expression",
    "to_string",
    "evaluate",
    "derivative",
    "CalcTree",
    "VertexSpec",
    "Violation",
    "parse_tree",
    "parse_tree_file",
    "validate_tree",
    "serialize_tree",
    "propagate_means",
    "gradient_at_mean",
    "tree_gradients",
    "compose_root_expression",
    "AllocationPlan",
    "MomentState",
    "TreeMoments",
    "leaf_moments",
    "leaf_statistics",
    "tree_moments",
    "sigma2_recursion",
    "pair_cov_recursion",
    "compute_moments",
    "estimator_variance",
    "psi_eval",
    "mean_bias_second_order",
    "AlphaGrid",
    "BellmanTable",
    "OptimizationResult",
    "backward_dp_grid",
    "forward_recovery",
    "collapsed_dp",
    "brute_force_oracle",
    "random_feasible_sizes",
    "SamplePopulation",
    "LeafDistribution",
    "ReplicationConfig",
    "SimulationReport",
    "stream_rng",
    "generate_leaf_population",
    "wave_populations",
    "wave_run",
    "sweep_run",
    "replicate",
    "summarize_replicates",
]
