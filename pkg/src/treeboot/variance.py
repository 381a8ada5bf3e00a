"""First-order variance model for the hierarchical bootstrap estimator.

For each vertex v the model tracks four moments of the resampled population
at that vertex: the mean mu_v, the variance sigma2_v of one population
element, the covariance C_v of two elements with distinct indices, and the
covariance Cov_v of two independent uniform draws (which hit the same index
with probability 1/n_v).  Linearizing every vertex function around its child
means gives closed recursions:

    sigma2_v = sum_i g_vi^2 * sigma2_i
    C_v      = sum_i g_vi^2 * Cov_i
    Cov_v    = sigma2_v / n_v + (1 - 1/n_v) * C_v

with leaf base case C_v = 0, Cov_v = sigma2_v / n_v.  The estimator is the
mean of the root population, and its variance under the model equals Cov at
the root.  Note sigma2 does not depend on the sample sizes, so it is computed
once per tree; only C and Cov change with an allocation.

The same quantities combine into the affine mixture

    psi_v(alpha) = alpha * sigma2_v + (1 - alpha) * Cov_v

which satisfies psi_v(alpha) = sum_i g_vi^2 * psi_i(alpha + (1-alpha)/n_v);
that identity is what makes the budget optimizer's value tables affine in
alpha, and it is property-tested in the suite.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .tree import CalcTree, propagate_means, tree_gradients, compose_root_expression
from . import expressions as ex

__all__ = [
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
]


@dataclass(frozen=True)
class AllocationPlan:
    """Integer sample sizes per vertex plus the cost vector and budget.

    ``sizes[i]`` and ``costs[i]`` belong to vertex id ``i + 1``.  Sizes must
    be >= 1: every vertex population has to exist before it can be resampled.
    """

    sizes: tuple[int, ...]
    costs: tuple[int, ...]
    budget: int

    def __post_init__(self):
        if len(self.sizes) != len(self.costs):
            raise ValueError("invalid allocation: sizes and costs differ in length")
        if any(n < 1 for n in self.sizes):
            raise ValueError("invalid allocation: sample sizes must be >= 1")
        if any(a < 0 for a in self.costs):
            raise ValueError("invalid allocation: costs must be >= 0")
        if self.budget < 0:
            raise ValueError("invalid allocation: budget must be >= 0")

    @classmethod
    def for_tree(
        cls,
        tree: CalcTree,
        sizes,
        costs=None,
        budget: int | None = None,
    ) -> "AllocationPlan":
        """Build a plan for ``tree``; costs default to the tree's cost fields.

        When ``budget`` is omitted the plan is self-budgeted (budget equals
        its own total cost), which is convenient for plain variance queries.
        """
        sizes = tuple(int(n) for n in sizes)
        if len(sizes) != tree.k:
            raise ValueError(
                f"invalid allocation: expected {tree.k} sizes, got {len(sizes)}"
            )
        costs = tree.costs if costs is None else tuple(int(a) for a in costs)
        if budget is None:
            budget = int(sum(a * n for a, n in zip(costs, sizes)))
        return cls(sizes=sizes, costs=costs, budget=int(budget))

    def size(self, vid: int) -> int:
        return self.sizes[vid - 1]

    def cost(self, vid: int) -> int:
        return self.costs[vid - 1]

    @property
    def total_cost(self) -> int:
        return sum(a * n for a, n in zip(self.costs, self.sizes))

    @property
    def feasible(self) -> bool:
        return self.total_cost <= self.budget


@dataclass(frozen=True)
class MomentState:
    """Per-vertex moments for one allocation: maps from vertex id."""

    mean: dict[int, float]
    variance: dict[int, float]
    distinct_cov: dict[int, float]
    draw_cov: dict[int, float]


@dataclass(frozen=True)
class TreeMoments:
    """Size-independent ingredients of the model, computed once per tree."""

    means: dict[int, float]
    gradients: dict[int, dict[int, float]]
    sigma2: dict[int, float]


def leaf_moments(samples) -> tuple[float, float]:
    """Sample mean and unbiased sample variance of a leaf population."""
    values = np.asarray(list(samples), dtype=float)
    if values.size < 2:
        raise ValueError("insufficient data: need at least 2 samples")
    mean = float(values.mean())
    var = float(values.var(ddof=1))
    return mean, var


def leaf_statistics(tree: CalcTree) -> dict[int, tuple[float, float]]:
    """Resolved (mean, variance) per leaf; explicit values beat estimates."""
    out: dict[int, tuple[float, float]] = {}
    for v in tree.vertices:
        if not v.is_leaf:
            continue
        if v.mean is not None:
            out[v.id] = (v.mean, v.variance)
        elif v.samples is not None:
            out[v.id] = leaf_moments(v.samples)
        else:
            raise ValueError(
                f"vertex {v.id}: leaf statistics missing (no mean/variance, no samples)"
            )
    return out


@functools.lru_cache(maxsize=256)
def tree_moments(tree: CalcTree) -> TreeMoments:
    """Means, gradients and sigma2 for a tree; cached because trees are immutable."""
    means = propagate_means(tree)
    gradients = tree_gradients(tree)
    stats = leaf_statistics(tree)
    sigma2 = sigma2_recursion(tree, gradients, {v: s[1] for v, s in stats.items()})
    return TreeMoments(means=means, gradients=gradients, sigma2=sigma2)


def sigma2_recursion(
    tree: CalcTree,
    gradients: dict[int, dict[int, float]],
    leaf_sigma2: dict[int, float],
) -> dict[int, float]:
    """Element variance per vertex via the linearized recursion.

    Internal vertices combine child variances with squared gradient weights;
    the result does not involve any sample size.
    """
    sigma2: dict[int, float] = {}
    for v in tree.vertices:
        if v.is_leaf:
            sigma2[v.id] = float(leaf_sigma2[v.id])
        else:
            g = gradients[v.id]
            sigma2[v.id] = float(sum(g[c] * g[c] * sigma2[c] for c in v.children))
    return sigma2


def pair_cov_recursion(
    tree: CalcTree,
    gradients: dict[int, dict[int, float]] | None,
    plan: AllocationPlan,
) -> MomentState:
    """Full moment state for one allocation.

    Leaves start from C = 0 and Cov = sigma2/n; each internal vertex mixes
    its element variance with the distinct-index covariance of its children,
    in increasing id order.
    """
    base = tree_moments(tree)
    if gradients is None:
        gradients = base.gradients
    if len(plan.sizes) != tree.k:
        raise ValueError(f"invalid allocation: expected {tree.k} sizes")

    distinct: dict[int, float] = {}
    draw: dict[int, float] = {}
    for v in tree.vertices:
        n = plan.size(v.id)
        s2 = base.sigma2[v.id]
        if v.is_leaf:
            distinct[v.id] = 0.0
            draw[v.id] = s2 / n
        else:
            g = gradients[v.id]
            c_v = float(sum(g[c] * g[c] * draw[c] for c in v.children))
            distinct[v.id] = c_v
            draw[v.id] = s2 / n + (1.0 - 1.0 / n) * c_v
    return MomentState(
        mean=dict(base.means),
        variance=dict(base.sigma2),
        distinct_cov=distinct,
        draw_cov=draw,
    )


def compute_moments(tree: CalcTree, plan: AllocationPlan) -> MomentState:
    """Moment state using the tree's own cached gradients."""
    return pair_cov_recursion(tree, None, plan)


def estimator_variance(tree: CalcTree, plan: AllocationPlan) -> float:
    """Model variance of the bootstrap estimator (the root population mean).

    Equals sigma2_k/r + (1 - 1/r)*C_k with r the root sample size, i.e. the
    unconditional covariance of two independent draws from the root
    population; identically psi_eval at the root with mixing weight 0.
    """
    return compute_moments(tree, plan).draw_cov[tree.k]


def psi_eval(tree: CalcTree, plan: AllocationPlan, vid: int, alpha: float) -> float:
    """Affine moment mixture alpha*sigma2_v + (1-alpha)*Cov_v at vertex ``vid``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"invalid mixing weight: alpha={alpha} outside [0, 1]")
    state = compute_moments(tree, plan)
    return alpha * state.variance[vid] + (1.0 - alpha) * state.draw_cov[vid]


def mean_bias_second_order(tree: CalcTree) -> float:
    """Second-order mean correction of the root function, as a diagnostic.

    Half the sum over leaves of leaf variance times the pure second partial
    derivative of the composed root function at the mean point.  Reported
    only; never added to the estimator.
    """
    composed = compose_root_expression(tree)
    stats = leaf_statistics(tree)
    means = propagate_means(tree)
    env = {v: means[v] for v in tree.leaf_ids}
    total = 0.0
    for leaf in tree.leaf_ids:
        second = ex.derivative(ex.derivative(composed, leaf), leaf)
        try:
            total += stats[leaf][1] * float(ex.evaluate(second, env))
        except DomainError as err:
            raise DomainError(str(err), vertex=tree.k) from None
    return 0.5 * total


# ---------------------------------------------------------------------------
# vectorized engine (used by the optimizer's enumeration oracle)
# ---------------------------------------------------------------------------


def draw_cov_for_size_matrix(
    tree: CalcTree, moments: TreeMoments, sizes: np.ndarray
) -> np.ndarray:
    """Root draw covariance for many allocations at once.

    ``sizes`` has shape (N, k) with column v-1 holding n_v; returns shape (N,).
    Same recursion as pair_cov_recursion, vectorized across rows.
    """
    sizes = np.asarray(sizes, dtype=float)
    draw: dict[int, np.ndarray] = {}
    for v in tree.vertices:
        n = sizes[:, v.id - 1]
        s2 = moments.sigma2[v.id]
        if v.is_leaf:
            draw[v.id] = s2 / n
        else:
            g = moments.gradients[v.id]
            c_v = sum(g[c] * g[c] * draw[c] for c in v.children)
            draw[v.id] = s2 / n + (1.0 - 1.0 / n) * c_v
    return draw[tree.k]
