"""Command-line front-end.

Commands: ``validate``, ``variance``, ``optimize``, ``simulate`` and
``oracle-check``.  Every command reads a JSON tree document; randomized
commands echo the effective seed so a run can be replayed exactly.  Exit
status is 0 on success, 1 on domain or validation errors, 2 when a budget
is infeasible.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field

import numpy as np

from . import allocate, simulate, tree as tree_mod, variance as var_mod
from .errors import InfeasibleError, TreeBootError

__all__ = ["RunConfig", "run", "main"]

_MASK64 = (1 << 64) - 1


@dataclass
class RunConfig:
    """Resolved settings for one CLI invocation."""

    command: str
    tree_path: str
    budget: int | None = None
    sizes: tuple[int, ...] | None = None
    cost_overrides: dict[int, int] = field(default_factory=dict)
    alpha_grid: int = allocate.DEFAULT_GRID_SIZE
    replications: int = 10_000
    seed: int | None = None
    output_format: str = "human"
    method: str = "collapsed"
    cap: int | None = None
    fixed_data: bool = False


def _parse_costs_spec(spec: str) -> dict[int, int]:
    overrides = {}
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            vid, cost = part.split("=")
            overrides[int(vid)] = int(cost)
        except ValueError:
            raise ValueError(f"bad cost override {part!r}; expected ID=COST") from None
    return overrides


def _effective_costs(tree, overrides: dict[int, int]) -> tuple[int, ...]:
    costs = list(tree.costs)
    for vid, cost in overrides.items():
        if not 1 <= vid <= tree.k:
            raise ValueError(f"cost override for unknown vertex {vid}")
        costs[vid - 1] = cost
    return tuple(costs)


def _result_doc(result: allocate.OptimizationResult) -> dict:
    return {
        "sizes": {str(v): n for v, n in result.sizes.items()},
        "budgets": {str(v): z for v, z in result.budgets.items()},
        "variance": result.variance,
        "alpha": {str(v): a for v, a in result.alpha.items()},
    }


def run(config: RunConfig) -> tuple[int, dict]:
    """Execute one command; returns (exit status, report document)."""
    tree = tree_mod.parse_tree_file(config.tree_path)

    if config.command == "validate":
        violations = tree_mod.validate_tree(tree)
        doc = {
            "valid": not violations,
            "vertices": tree.k,
            "leaves": tree.m,
            "violations": [str(v) for v in violations],
        }
        return (0 if not violations else 1), doc

    costs = _effective_costs(tree, config.cost_overrides)

    if config.command == "variance":
        plan = var_mod.AllocationPlan.for_tree(tree, config.sizes, costs=costs)
        value = var_mod.estimator_variance(tree, plan)
        doc = {
            "variance": value,
            "sizes": {str(v): plan.size(v) for v in range(1, tree.k + 1)},
            "total_cost": plan.total_cost,
        }
        return 0, doc

    if config.command == "optimize":
        if config.method == "grid":
            table = allocate.backward_dp_grid(
                tree,
                budget=config.budget,
                costs=costs,
                grid=allocate.AlphaGrid.default(config.alpha_grid),
            )
            result = allocate.forward_recovery(tree, table, config.budget)
        else:
            result = allocate.collapsed_dp(tree, budget=config.budget, costs=costs)
        return 0, _result_doc(result)

    if config.command == "simulate":
        seed = config.seed
        if seed is None:
            seed = int(np.random.SeedSequence().entropy) & _MASK64
        plan = var_mod.AllocationPlan.for_tree(tree, config.sizes, costs=costs)
        sources = None
        if not config.fixed_data:
            stats = var_mod.leaf_statistics(tree)
            sources = {
                leaf: simulate.LeafDistribution.normal(*stats[leaf])
                for leaf in tree.leaf_ids
            }
        cfg = simulate.ReplicationConfig(
            replications=config.replications,
            seed=seed,
            plan=plan,
            leaf_sources=sources,
        )
        report = simulate.replicate(cfg, tree)
        doc = {
            "mean": report.mean,
            "variance": report.variance,
            "se_mean": report.se_mean,
            "se_variance": report.se_variance,
            "replications": config.replications,
            "seed": seed,
            "mode": "fixed-data" if config.fixed_data else "synthetic-normal",
        }
        return 0, doc

    if config.command == "oracle-check":
        dp = allocate.collapsed_dp(tree, budget=config.budget, costs=costs)
        oracle = allocate.brute_force_oracle(
            tree, budget=config.budget, costs=costs, cap=config.cap
        )
        difference = abs(dp.variance - oracle.variance)
        ok = difference <= 1e-9
        doc = {
            "dp": _result_doc(dp),
            "oracle": _result_doc(oracle),
            "difference": difference,
            "pass": ok,
        }
        return (0 if ok else 1), doc

    raise ValueError(f"unknown command {config.command!r}")


def _render_human(command: str, doc: dict) -> str:
    lines = []
    if command == "validate":
        lines.append(
            f"tree: {doc['vertices']} vertices, {doc['leaves']} leaves: "
            + ("valid" if doc["valid"] else "INVALID")
        )
        lines.extend(f"  - {v}" for v in doc["violations"])
    elif command == "variance":
        sizes = ", ".join(f"n{v}={n}" for v, n in doc["sizes"].items())
        lines.append(f"estimator variance: {doc['variance']:.12g}")
        lines.append(f"sizes: {sizes} (total cost {doc['total_cost']})")
    elif command == "optimize":
        lines.append(f"minimal variance: {doc['variance']:.12g}")
        lines.append("vertex  size  budget  alpha")
        for v in sorted(doc["sizes"], key=int):
            lines.append(
                f"{v:>6}  {doc['sizes'][v]:>4}  {doc['budgets'][v]:>6}"
                f"  {doc['alpha'][v]:.6f}"
            )
    elif command == "simulate":
        lines.append(f"replications: {doc['replications']} (seed {doc['seed']}, {doc['mode']})")
        lines.append(f"mean:     {doc['mean']:.12g} (se {doc['se_mean']:.3g})")
        lines.append(f"variance: {doc['variance']:.12g} (se {doc['se_variance']:.3g})")
    elif command == "oracle-check":
        lines.append(f"dp variance:     {doc['dp']['variance']:.12g}")
        lines.append(f"oracle variance: {doc['oracle']['variance']:.12g}")
        lines.append(f"difference:      {doc['difference']:.3g}")
        lines.append("PASS" if doc["pass"] else "FAIL")
    return "\n".join(lines)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="treeboot",
        description="Hierarchical bootstrap on calculation trees: variance "
        "model, budget optimizer, Monte Carlo validation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, budget=False, sizes=False, sim=False, method=False, cap=False):
        p.add_argument("--tree", required=True, help="path to the JSON tree document")
        p.add_argument("--costs", default="", help="per-vertex cost overrides, e.g. 3=2,5=1")
        p.add_argument(
            "--format",
            choices=("human", "json"),
            default="human",
            help="output format (json is the machine-readable document)",
        )
        if budget:
            p.add_argument("--budget", type=int, required=True, help="total budget b")
        if sizes:
            p.add_argument(
                "--sizes", required=True, help="comma-separated sample sizes n_1..n_k"
            )
        if method:
            p.add_argument("--method", choices=("collapsed", "grid"), default="collapsed")
            p.add_argument(
                "--alpha-grid",
                type=int,
                default=allocate.DEFAULT_GRID_SIZE,
                help="grid size for --method grid",
            )
        if sim:
            p.add_argument("--replications", type=int, default=10_000)
            p.add_argument("--seed", type=int, default=None)
            p.add_argument(
                "--fixed-data",
                action="store_true",
                help="resample the attached leaf samples instead of drawing "
                "fresh normal populations",
            )
        if cap:
            p.add_argument("--cap", type=int, default=None, help="per-vertex size cap")

    common(sub.add_parser("validate", help="check tree structure"))
    common(sub.add_parser("variance", help="model variance for given sizes"), sizes=True)
    common(sub.add_parser("optimize", help="optimal sizes under a budget"),
           budget=True, method=True)
    common(sub.add_parser("simulate", help="Monte Carlo replication study"), sizes=True, sim=True)
    common(sub.add_parser("oracle-check", help="dynamic program vs enumeration"),
           budget=True, cap=True)
    return parser


def _config_from_args(args) -> RunConfig:
    sizes = None
    if getattr(args, "sizes", None) is not None:
        try:
            sizes = tuple(int(s) for s in args.sizes.split(","))
        except ValueError:
            raise ValueError(f"bad --sizes value {args.sizes!r}") from None
    return RunConfig(
        command=args.command,
        tree_path=args.tree,
        budget=getattr(args, "budget", None),
        sizes=sizes,
        cost_overrides=_parse_costs_spec(args.costs),
        alpha_grid=getattr(args, "alpha_grid", allocate.DEFAULT_GRID_SIZE),
        replications=getattr(args, "replications", 10_000),
        seed=getattr(args, "seed", None),
        output_format=args.format,
        method=getattr(args, "method", "collapsed"),
        cap=getattr(args, "cap", None),
        fixed_data=getattr(args, "fixed_data", False),
    )


_MODULE_LABELS = {
    "ExpressionSyntaxError": "tree-model",
    "TreeDocumentError": "tree-model",
    "TreeValidationError": "tree-model",
    "DomainError": "tree-model",
    "InfeasibleError": "allocator",
    "SearchSpaceError": "allocator",
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = _config_from_args(args)
        code, doc = run(config)
    except InfeasibleError as err:
        print(f"allocator: {err}", file=sys.stderr)
        return 2
    except TreeBootError as err:
        label = _MODULE_LABELS.get(type(err).__name__, "treeboot")
        print(f"{label}: {err}", file=sys.stderr)
        return 1
    except ValueError as err:
        print(f"treeboot: {err}", file=sys.stderr)
        return 1
    if args.format == "json":
        print(json.dumps(doc, indent=2, sort_keys=True))
    else:
        print(_render_human(args.command, doc))
    return code


if __name__ == "__main__":
    sys.exit(main())
