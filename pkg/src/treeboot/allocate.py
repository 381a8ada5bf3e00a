"""Budget-constrained sample-size optimization on calculation trees.

The optimizer minimizes the model variance of the bootstrap estimator over
integer sample sizes n_1..n_k subject to a linear budget
sum(a_v * n_v) <= b.  Because the tree is strict (disjoint subtrees), the
problem decomposes: the minimum over a subtree depends on its allotted
budget z and, through the covariance mixing weight alpha, on the sample
sizes chosen above it.  Three solvers are provided:

``backward_dp_grid``
    The reference two-argument Bellman recursion over value tables indexed
    by (alpha, z).  alpha is discretized on a grid and off-grid queries use
    linear interpolation; under the first-order model every table is affine
    in alpha, so interpolation is exact up to rounding.

``collapsed_dp``
    The production solver.  It exploits the affine structure directly: each
    table collapses to alpha * sigma2_v + (1 - alpha) * K_v(z) where K_v(z)
    is the minimum root-draw covariance of the subtree, so the recursion
    runs over z only and involves no discretization at all.

``brute_force_oracle``
    Exhaustive enumeration of feasible allocations; the independent check
    the other two are tested against.

Tie-breaking is deterministic everywhere: the smallest sample size wins,
and among equal-value child budget splits the lower-id child keeps the
extra budget.  The enumeration oracle instead returns the lexicographically
smallest optimal size vector, so tied optima may differ in sizes between
solvers while always agreeing in value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InfeasibleError, SearchSpaceError
from .tree import CalcTree
from .variance import TreeMoments, draw_cov_for_size_matrix, tree_moments

__all__ = [
    "AlphaGrid",
    "BellmanTable",
    "OptimizationResult",
    "backward_dp_grid",
    "forward_recovery",
    "collapsed_dp",
    "brute_force_oracle",
    "random_feasible_sizes",
]

DEFAULT_GRID_SIZE = 101
DEFAULT_MAX_BUDGET = 10**6
DEFAULT_MAX_CANDIDATES = 10**7


@dataclass(frozen=True)
class AlphaGrid:
    """Strictly increasing mixing-weight grid spanning [0, 1] inclusive."""

    points: tuple[float, ...]

    def __post_init__(self):
        pts = self.points
        if len(pts) < 2 or pts[0] != 0.0 or pts[-1] != 1.0:
            raise ValueError("alpha grid must start at 0.0 and end at 1.0")
        if any(b <= a for a, b in zip(pts, pts[1:])):
            raise ValueError("alpha grid must be strictly increasing")

    @classmethod
    def default(cls, count: int = DEFAULT_GRID_SIZE) -> "AlphaGrid":
        if count < 2:
            raise ValueError("alpha grid needs at least 2 points")
        return cls(tuple(np.linspace(0.0, 1.0, count)))

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class BellmanTable:
    """Backward-pass output: value tables plus argmin records per vertex.

    ``values[v]`` has shape (grid size, budget + 1); +inf marks (alpha, z)
    cells whose subtree cannot afford one draw everywhere.  For internal
    vertices ``n_choice[v]`` holds the minimizing own sample size (0 in
    infeasible cells) and ``splits[v]`` the child budget split, both indexed
    the same way.
    """

    grid: AlphaGrid
    budget: int
    costs: tuple[int, ...]
    values: dict[int, np.ndarray]
    n_choice: dict[int, np.ndarray]
    splits: dict[int, np.ndarray]
    min_cost: dict[int, int]


@dataclass(frozen=True)
class OptimizationResult:
    """Optimal sizes, per-vertex budgets, achieved variance, mixing weights."""

    sizes: dict[int, int]
    budgets: dict[int, int]
    variance: float
    alpha: dict[int, float]


# ---------------------------------------------------------------------------
# shared machinery
# ---------------------------------------------------------------------------


def _check_setup(tree: CalcTree, budget, costs, max_budget: int):
    if budget is None:
        raise ValueError("budget is required")
    budget = int(budget)
    if budget < 0:
        raise ValueError("budget must be >= 0")
    if budget > max_budget:
        raise ValueError(f"budget {budget} exceeds the guard {max_budget}")
    costs = tree.costs if costs is None else tuple(int(a) for a in costs)
    if len(costs) != tree.k:
        raise ValueError(f"expected {tree.k} costs, got {len(costs)}")
    if any(a < 1 for a in costs):
        raise ValueError("optimization requires positive per-vertex costs")
    return budget, costs


def _subtree_min_cost(tree: CalcTree, costs: tuple[int, ...]) -> dict[int, int]:
    out: dict[int, int] = {}
    for v in tree.vertices:
        out[v.id] = costs[v.id - 1] + sum(out[c] for c in v.children)
    return out


def _scaled(g2: float, rows: np.ndarray) -> np.ndarray:
    # keep +inf infeasibility marks even under a zero gradient weight
    return np.where(np.isinf(rows), np.inf, g2 * rows)


def _minplus_fold(rows: list[np.ndarray]) -> tuple[np.ndarray, list[np.ndarray]]:
    """Minimize a separable sum over child budget splits.

    ``rows[j]`` has shape (N, B): the value of giving child j a budget t,
    batched over N scenarios.  Returns the fold F with F[n, y] the minimum of
    sum_j rows[j][n, z_j] over splits with sum z_j <= y, plus one record
    array per child for split recovery.  Children are folded from the right
    so that recovery walks them left to right; argmin ties take the largest
    budget, which hands leftover budget to lower-id children.
    """
    N, B = rows[0].shape
    offs = np.arange(B)[:, None] - np.arange(B)[None, :]
    valid = offs >= 0
    offs_c = np.clip(offs, 0, None)
    F = np.zeros((N, B))
    records: list[np.ndarray] = [np.zeros((N, B), dtype=int)] * len(rows)
    for j in range(len(rows) - 1, -1, -1):
        with np.errstate(invalid="ignore"):
            cand = rows[j][:, None, :] + F[:, offs_c]
        cand = np.where(valid[None, :, :], cand, np.inf)
        t_best = (B - 1) - np.argmin(cand[:, :, ::-1], axis=2)
        F = np.take_along_axis(cand, t_best[:, :, None], axis=2)[:, :, 0]
        records[j] = t_best
    return F, records


def _walk_splits(records: list[np.ndarray], n_idx: np.ndarray, start_y: np.ndarray,
                 finite: np.ndarray) -> np.ndarray:
    """Recover per-child budgets from fold records for every z at once."""
    B = n_idx.shape[0]
    J = len(records)
    out = np.zeros((B, J), dtype=int)
    y = np.where(finite, start_y, 0)
    for j in range(J):
        t = records[j][n_idx, np.clip(y, 0, None)]
        t = np.where(finite, t, 0)
        out[:, j] = t
        y = y - t
    return out


def _alpha_walk(tree: CalcTree, sizes: dict[int, int]) -> dict[int, float]:
    """Effective mixing weight per vertex implied by the chosen sizes.

    The root is queried at 0; each vertex maps its query weight q to
    q + (1 - q)/n_v, which is the weight its own children are queried at.
    """
    alpha: dict[int, float] = {}
    for v in sorted(sizes, reverse=True):
        parent = tree.parent(v)
        q = 0.0 if parent is None else alpha[parent]
        alpha[v] = q + (1.0 - q) / sizes[v]
    return alpha


def _interp_alpha(table: np.ndarray, pts: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Rows of a (grid, budget) table at off-grid mixing weights ``beta``."""
    i0 = np.clip(np.searchsorted(pts, beta, side="right") - 1, 0, len(pts) - 2)
    w = (beta - pts[i0]) / (pts[i0 + 1] - pts[i0])
    lo = table[i0]
    hi = table[i0 + 1]
    bad = ~np.isfinite(lo) | ~np.isfinite(hi)
    with np.errstate(invalid="ignore"):
        out = (1.0 - w)[:, None] * lo + w[:, None] * hi
    return np.where(bad, np.inf, out)


def _grid_index(pts: np.ndarray, alpha: float) -> int:
    return int(min(np.searchsorted(pts, alpha, side="right") - 1, len(pts) - 1))


# ---------------------------------------------------------------------------
# grid Bellman recursion
# ---------------------------------------------------------------------------


def backward_dp_grid(
    tree: CalcTree,
    moments: TreeMoments | None = None,
    budget: int | None = None,
    costs=None,
    grid: AlphaGrid | None = None,
    max_budget: int = DEFAULT_MAX_BUDGET,
) -> BellmanTable:
    """Backward pass of the two-argument Bellman recursion.

    Builds, for every vertex, the table of minimal subtree mixture values
    over (mixing weight, budget).  Leaves take the largest affordable sample
    size directly; an internal vertex minimizes over its own size and over
    integer budget splits among children, the split minimum computed by a
    sequential fold.  Child tables are read at shifted mixing weights via
    linear interpolation.
    """
    budget, costs = _check_setup(tree, budget, costs, max_budget)
    if moments is None:
        moments = tree_moments(tree)
    if grid is None:
        grid = AlphaGrid.default()
    min_cost = _subtree_min_cost(tree, costs)
    if budget < min_cost[tree.k]:
        raise InfeasibleError(
            f"infeasible: budget {budget} below minimal total cost {min_cost[tree.k]}"
        )

    pts = np.asarray(grid.points)
    G = len(pts)
    B = budget + 1
    z_all = np.arange(B)
    values: dict[int, np.ndarray] = {}
    n_choice: dict[int, np.ndarray] = {}
    splits: dict[int, np.ndarray] = {}

    for v in tree.vertices:
        a_v = costs[v.id - 1]
        if v.is_leaf:
            counts = z_all // a_v
            feasible = counts >= 1
            inv = np.where(feasible, 1.0 / np.maximum(counts, 1), 0.0)
            s2 = moments.sigma2[v.id]
            tab = s2 * (pts[:, None] + (1.0 - pts[:, None]) * inv[None, :])
            values[v.id] = np.where(feasible[None, :], tab, np.inf)
            continue

        children = v.children
        J = len(children)
        g2 = [moments.gradients[v.id][c] ** 2 for c in children]
        child_min_total = sum(min_cost[c] for c in children)
        n_max = (budget - child_min_total) // a_v
        vals_v = np.full((G, B), np.inf)
        nrec_v = np.zeros((G, B), dtype=int)
        srec_v = np.zeros((G, B, J), dtype=int)
        if n_max >= 1:
            n_vals = np.arange(1, n_max + 1)
            shift = z_all[None, :] - a_v * n_vals[:, None]
            shift_ok = shift >= 0
            shift_c = np.clip(shift, 0, None)
            for gi in range(G):
                alpha = pts[gi]
                beta = alpha + (1.0 - alpha) / n_vals
                rows = [
                    _scaled(g2[j], _interp_alpha(values[c], pts, beta))
                    for j, c in enumerate(children)
                ]
                F, records = _minplus_fold(rows)
                cand = np.where(shift_ok, np.take_along_axis(F, shift_c, axis=1), np.inf)
                n_idx = np.argmin(cand, axis=0)
                best = np.take_along_axis(cand, n_idx[None, :], axis=0)[0]
                finite = np.isfinite(best)
                vals_v[gi] = best
                nrec_v[gi] = np.where(finite, n_vals[n_idx], 0)
                start_y = z_all - a_v * np.where(finite, n_vals[n_idx], 0)
                srec_v[gi] = _walk_splits(records, n_idx, start_y, finite)
        values[v.id] = vals_v
        n_choice[v.id] = nrec_v
        splits[v.id] = srec_v

    return BellmanTable(
        grid=grid,
        budget=budget,
        costs=costs,
        values=values,
        n_choice=n_choice,
        splits=splits,
        min_cost=min_cost,
    )


def forward_recovery(tree: CalcTree, table: BellmanTable, budget: int) -> OptimizationResult:
    """Descend the recorded argmins from the root to recover optimal sizes.

    The root record is read at mixing weight 0 and the full budget; each
    child is then read at the weight its parent's size implies.  Records are
    constant across interior grid weights (the tables are affine in alpha),
    so the lookup snaps to the grid point at or below the query.  Leaf sizes
    are the integer part of allotted budget over cost.
    """
    if not 0 <= budget <= table.budget:
        raise ValueError(f"table covers budgets 0..{table.budget}, got {budget}")
    pts = np.asarray(table.grid.points)
    root_value = float(table.values[tree.k][0, budget])
    if not np.isfinite(root_value):
        raise InfeasibleError(f"infeasible: budget {budget} cannot cover the tree")

    sizes: dict[int, int] = {}
    budgets: dict[int, int] = {tree.k: budget}
    stack: list[tuple[int, float, int]] = [(tree.k, 0.0, budget)]
    while stack:
        vid, query, z = stack.pop()
        spec = tree.vertex(vid)
        a_v = table.costs[vid - 1]
        if spec.is_leaf:
            n = z // a_v
            if n < 1:
                raise RuntimeError(f"inconsistent table: leaf {vid} got budget {z}")
            sizes[vid] = int(n)
            continue
        gi = _grid_index(pts, query)
        n = int(table.n_choice[vid][gi, z])
        if n < 1:
            raise RuntimeError(f"inconsistent table: no record at vertex {vid}, z={z}")
        sizes[vid] = n
        child_alpha = query + (1.0 - query) / n
        split = table.splits[vid][gi, z]
        for c, zc in zip(spec.children, split):
            budgets[c] = int(zc)
            stack.append((c, child_alpha, int(zc)))

    return OptimizationResult(
        sizes=dict(sorted(sizes.items())),
        budgets=dict(sorted(budgets.items())),
        variance=root_value,
        alpha=_alpha_walk(tree, sizes),
    )


# ---------------------------------------------------------------------------
# collapsed (exact) recursion
# ---------------------------------------------------------------------------


def collapsed_dp(
    tree: CalcTree,
    moments: TreeMoments | None = None,
    budget: int | None = None,
    costs=None,
    max_budget: int = DEFAULT_MAX_BUDGET,
) -> OptimizationResult:
    """Exact budget optimizer over the collapsed one-argument tables.

    Under the first-order model every (alpha, z) table is affine in alpha
    with a size-independent alpha-slope, so minimizing the mixture at any
    alpha < 1 is the same as minimizing the root-draw covariance K_v(z).
    The recursion therefore runs over budgets only and needs no grid:

        leaf:     K_v(z) = sigma2_v / floor(z / a_v)
        internal: K_v(z) = min over n, splits of
                  sigma2_v / n + (1 - 1/n) * sum_i g_vi^2 K_i(z_i)

    subject to a_v * n + sum z_i <= z.  The achieved variance is K at the
    root with the full budget.
    """
    budget, costs = _check_setup(tree, budget, costs, max_budget)
    if moments is None:
        moments = tree_moments(tree)
    min_cost = _subtree_min_cost(tree, costs)
    if budget < min_cost[tree.k]:
        raise InfeasibleError(
            f"infeasible: budget {budget} below minimal total cost {min_cost[tree.k]}"
        )

    B = budget + 1
    z_all = np.arange(B)
    K: dict[int, np.ndarray] = {}
    n_choice: dict[int, np.ndarray] = {}
    splits: dict[int, np.ndarray] = {}

    for v in tree.vertices:
        a_v = costs[v.id - 1]
        s2 = moments.sigma2[v.id]
        if v.is_leaf:
            counts = z_all // a_v
            K[v.id] = np.where(counts >= 1, s2 / np.maximum(counts, 1), np.inf)
            continue

        children = v.children
        g2 = [moments.gradients[v.id][c] ** 2 for c in children]
        child_min_total = sum(min_cost[c] for c in children)
        n_max = (budget - child_min_total) // a_v
        K_v = np.full(B, np.inf)
        nrec = np.zeros(B, dtype=int)
        srec = np.zeros((B, len(children)), dtype=int)
        if n_max >= 1:
            rows = [_scaled(g2[j], K[c][None, :]) for j, c in enumerate(children)]
            F, records = _minplus_fold(rows)
            S = F[0]
            n_vals = np.arange(1, n_max + 1)
            shift = z_all[None, :] - a_v * n_vals[:, None]
            shift_ok = shift >= 0
            gathered = S[np.clip(shift, 0, None)]
            ok = shift_ok & np.isfinite(gathered)
            inv_n = 1.0 / n_vals
            obj = np.where(
                ok,
                s2 * inv_n[:, None]
                + (1.0 - inv_n)[:, None] * np.where(ok, gathered, 0.0),
                np.inf,
            )
            n_idx = np.argmin(obj, axis=0)
            K_v = np.take_along_axis(obj, n_idx[None, :], axis=0)[0]
            finite = np.isfinite(K_v)
            nrec = np.where(finite, n_vals[n_idx], 0)
            start_y = z_all - a_v * nrec
            srec = _walk_splits(records, np.zeros(B, dtype=int), start_y, finite)
        K[v.id] = K_v
        n_choice[v.id] = nrec
        splits[v.id] = srec

    root_value = float(K[tree.k][budget])
    if not np.isfinite(root_value):
        raise InfeasibleError(f"infeasible: budget {budget} cannot cover the tree")

    sizes: dict[int, int] = {}
    budgets: dict[int, int] = {tree.k: budget}
    stack = [(tree.k, budget)]
    while stack:
        vid, z = stack.pop()
        spec = tree.vertex(vid)
        a_v = costs[vid - 1]
        if spec.is_leaf:
            sizes[vid] = int(z // a_v)
            continue
        n = int(n_choice[vid][z])
        if n < 1:
            raise RuntimeError(f"inconsistent table: no record at vertex {vid}, z={z}")
        sizes[vid] = n
        for c, zc in zip(spec.children, splits[vid][z]):
            budgets[c] = int(zc)
            stack.append((c, int(zc)))

    return OptimizationResult(
        sizes=dict(sorted(sizes.items())),
        budgets=dict(sorted(budgets.items())),
        variance=root_value,
        alpha=_alpha_walk(tree, sizes),
    )


# ---------------------------------------------------------------------------
# enumeration oracle
# ---------------------------------------------------------------------------


def brute_force_oracle(
    tree: CalcTree,
    moments: TreeMoments | None = None,
    budget: int | None = None,
    costs=None,
    cap: int | None = None,
    max_candidates: int = DEFAULT_MAX_CANDIDATES,
    max_budget: int = DEFAULT_MAX_BUDGET,
) -> OptimizationResult:
    """Exhaustive minimum over all feasible integer allocations.

    Candidate sizes per vertex are pruned to what the budget allows when
    every other vertex sits at one draw, optionally capped.  Ties resolve to
    the lexicographically smallest size vector.  Guarded by
    ``max_candidates`` on the pruned enumeration size.
    """
    budget, costs = _check_setup(tree, budget, costs, max_budget)
    if moments is None:
        moments = tree_moments(tree)
    total_min = sum(costs)
    if budget < total_min:
        raise InfeasibleError(
            f"infeasible: budget {budget} below minimal total cost {total_min}"
        )

    k = tree.k
    highs = []
    for v in range(1, k + 1):
        a_v = costs[v - 1]
        hi = (budget - (total_min - a_v)) // a_v
        if cap is not None:
            hi = min(hi, int(cap))
        highs.append(max(hi, 1))
    space = 1
    for hi in highs:
        space *= hi
    if space > max_candidates:
        raise SearchSpaceError(
            f"search space too large: {space} candidates exceed guard {max_candidates}"
        )

    cost_vec = np.asarray(costs)
    shape = tuple(highs)
    best_value = np.inf
    best_flat = -1
    chunk = 200_000
    for start in range(0, space, chunk):
        stop = min(start + chunk, space)
        flat = np.arange(start, stop)
        sizes = np.stack(np.unravel_index(flat, shape), axis=1) + 1
        feasible = sizes @ cost_vec <= budget
        if not feasible.any():
            continue
        flat = flat[feasible]
        sizes = sizes[feasible]
        values = draw_cov_for_size_matrix(tree, moments, sizes)
        i = int(np.argmin(values))
        if values[i] < best_value:
            best_value = float(values[i])
            best_flat = int(flat[i])

    if best_flat < 0:
        raise InfeasibleError(f"infeasible: no candidate fits budget {budget}")

    best_sizes = [int(s) + 1 for s in np.unravel_index(best_flat, shape)]
    sizes = {v: best_sizes[v - 1] for v in range(1, k + 1)}

    consumed: dict[int, int] = {}
    for v in tree.vertices:
        consumed[v.id] = costs[v.id - 1] * sizes[v.id] + sum(
            consumed[c] for c in v.children
        )

    return OptimizationResult(
        sizes=sizes,
        budgets=dict(sorted(consumed.items())),
        variance=best_value,
        alpha=_alpha_walk(tree, sizes),
    )


def random_feasible_sizes(
    tree: CalcTree, budget: int, costs=None, rng: np.random.Generator | None = None
) -> dict[int, int]:
    """One uniform-ish feasible allocation, for sanity envelopes in tests.

    Walks the vertices in random order; each receives a uniform size between
    one draw and what the remaining budget allows with everything else at
    one draw.  Always feasible when the budget covers the minimal cost.
    """
    if rng is None:
        rng = np.random.default_rng()
    costs = tree.costs if costs is None else tuple(int(a) for a in costs)
    total_min = sum(costs)
    if budget < total_min:
        raise InfeasibleError(
            f"infeasible: budget {budget} below minimal total cost {total_min}"
        )
    order = list(range(1, tree.k + 1))
    rng.shuffle(order)
    sizes = {v: 1 for v in order}
    remaining = budget - total_min
    for v in order:
        a_v = costs[v - 1]
        extra = int(rng.integers(0, remaining // a_v + 1))
        sizes[v] += extra
        remaining -= extra * a_v
    return dict(sorted(sizes.items()))
