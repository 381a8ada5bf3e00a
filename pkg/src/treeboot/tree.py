"""Calculation trees: parsing, validation, means, and gradients.

A calculation tree has vertices numbered 1..k.  Vertices 1..m are leaves and
hold input samples or their (mean, variance) statistics; vertices m+1..k are
internal and hold a scalar expression over their child vertices; vertex k is
the root.  The numbering is "correct": every arc goes from a lower id to a
higher id, and every non-root vertex feeds exactly one parent, so the
structure is a strict tree evaluable in a single ascending sweep.
"""

from __future__ import annotations

import functools
import json
import os
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

from . import expressions as ex
from .errors import DomainError, TreeDocumentError, TreeValidationError

__all__ = [
    "VertexSpec",
    "CalcTree",
    "Violation",
    "parse_tree",
    "parse_tree_file",
    "validate_tree",
    "propagate_means",
    "gradient_at_mean",
    "tree_gradients",
    "serialize_tree",
    "compose_root_expression",
]


@dataclass(frozen=True)
class VertexSpec:
    """One vertex of a calculation tree.

    Leaves carry either explicit statistics (``mean`` and ``variance``
    together) or an attached sample population; explicit statistics take
    precedence when both are present.  Internal vertices carry the ordered
    child id tuple and an expression over variables named by those ids.
    ``cost`` is the per-draw price of this vertex in the budget constraint.
    """

    id: int
    kind: str
    cost: int = 1
    children: tuple[int, ...] = ()
    expr: ex.Expr | None = None
    mean: float | None = None
    variance: float | None = None
    samples: tuple[float, ...] | None = None
    samples_file: str | None = None

    @property
    def is_leaf(self) -> bool:
        return self.kind == "leaf"


@dataclass(frozen=True)
class CalcTree:
    """Immutable tree of VertexSpec entries, sorted by id."""

    vertices: tuple[VertexSpec, ...]

    @property
    def k(self) -> int:
        """Total vertex count; the root is vertex k."""
        return len(self.vertices)

    @property
    def m(self) -> int:
        """Number of leaves."""
        return sum(1 for v in self.vertices if v.is_leaf)

    def vertex(self, vid: int) -> VertexSpec:
        if 1 <= vid <= len(self.vertices) and self.vertices[vid - 1].id == vid:
            return self.vertices[vid - 1]
        for v in self.vertices:
            if v.id == vid:
                return v
        raise KeyError(f"no vertex {vid}")

    def children(self, vid: int) -> tuple[int, ...]:
        return self.vertex(vid).children

    @property
    def leaf_ids(self) -> tuple[int, ...]:
        return tuple(v.id for v in self.vertices if v.is_leaf)

    @property
    def internal_ids(self) -> tuple[int, ...]:
        return tuple(v.id for v in self.vertices if not v.is_leaf)

    @property
    def costs(self) -> tuple[int, ...]:
        return tuple(v.cost for v in self.vertices)

    def parent(self, vid: int) -> int | None:
        """The unique vertex fed by ``vid``, or None for the root."""
        return _parent_map(self).get(vid)


@functools.lru_cache(maxsize=256)
def _parent_map(tree: CalcTree) -> dict[int, int]:
    parents: dict[int, int] = {}
    for v in tree.vertices:
        for c in v.children:
            parents[c] = v.id
    return parents


@dataclass(frozen=True)
class Violation:
    """A structural rule broken by a specific vertex (or by the whole tree)."""

    vertex: int | None
    rule: str
    detail: str

    def __str__(self) -> str:
        where = f"vertex {self.vertex}" if self.vertex is not None else "tree"
        return f"{where}: {self.rule} ({self.detail})"


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def parse_tree(document: str | Mapping, base_dir: str | None = None) -> CalcTree:
    """Parse a JSON tree document into a validated CalcTree.

    ``document`` is JSON text or an already-decoded mapping with a
    ``vertices`` list.  ``base_dir`` anchors relative ``samples_file`` paths.
    Raises TreeDocumentError for malformed documents, ExpressionSyntaxError
    for bad expression text, and TreeValidationError when the assembled tree
    breaks a structural invariant.
    """
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as err:
            raise TreeDocumentError(f"malformed JSON: {err}") from None
    if not isinstance(document, Mapping) or "vertices" not in document:
        raise TreeDocumentError("document must be an object with a 'vertices' list")
    raw_vertices = document["vertices"]
    if not isinstance(raw_vertices, list) or not raw_vertices:
        raise TreeDocumentError("'vertices' must be a non-empty list")

    specs: dict[int, VertexSpec] = {}
    for entry in raw_vertices:
        spec = _parse_vertex(entry, base_dir)
        if spec.id in specs:
            raise TreeDocumentError(f"duplicate vertex id {spec.id}")
        specs[spec.id] = spec

    tree = CalcTree(tuple(specs[i] for i in sorted(specs)))
    violations = validate_tree(tree)
    if violations:
        raise TreeValidationError(violations)
    return tree


def _parse_vertex(entry, base_dir: str | None) -> VertexSpec:
    if not isinstance(entry, Mapping):
        raise TreeDocumentError("vertex entries must be objects")
    try:
        vid = int(entry["id"])
    except (KeyError, TypeError, ValueError):
        raise TreeDocumentError(f"vertex entry missing integer 'id': {entry!r}") from None
    kind = entry.get("kind")
    if kind not in ("leaf", "internal"):
        raise TreeDocumentError(f"vertex {vid}: 'kind' must be 'leaf' or 'internal'")
    cost = entry.get("cost", 1)
    if not isinstance(cost, int) or isinstance(cost, bool) or cost < 0:
        raise TreeDocumentError(f"vertex {vid}: 'cost' must be a non-negative integer")

    children = tuple(int(c) for c in entry.get("children", ()))
    expr = None
    if "expr" in entry:
        expr = ex.parse_expression(entry["expr"])
        unknown = ex.expression_variables(expr) - set(children)
        if unknown:
            raise TreeDocumentError(
                f"vertex {vid}: expression references unknown child id(s) "
                f"{sorted(unknown)}"
            )

    mean = entry.get("mean")
    variance = entry.get("variance")
    if (mean is None) != (variance is None):
        raise TreeDocumentError(
            f"vertex {vid}: 'mean' and 'variance' must be given together"
        )
    if mean is not None:
        mean, variance = float(mean), float(variance)
        if variance < 0.0:
            raise TreeDocumentError(f"vertex {vid}: 'variance' must be >= 0")

    samples = None
    samples_file = entry.get("samples_file")
    if samples_file is not None:
        path = samples_file
        if base_dir is not None and not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        samples = _load_samples(path, vid)

    return VertexSpec(
        id=vid,
        kind=kind,
        cost=cost,
        children=children,
        expr=expr,
        mean=mean,
        variance=variance,
        samples=samples,
        samples_file=samples_file,
    )


def _load_samples(path: str, vid: int) -> tuple[float, ...]:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            lines = [line.strip() for line in handle]
    except OSError as err:
        raise TreeDocumentError(f"vertex {vid}: cannot read samples file: {err}") from None
    values = []
    for lineno, line in enumerate(lines, start=1):
        if not line:
            continue
        try:
            values.append(float(line))
        except ValueError:
            raise TreeDocumentError(
                f"vertex {vid}: bad number {line!r} at {path}:{lineno}"
            ) from None
    if not values:
        raise TreeDocumentError(f"vertex {vid}: samples file {path} is empty")
    return tuple(values)


def parse_tree_file(path: str) -> CalcTree:
    """Read and parse a tree document from disk; samples paths resolve beside it."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            text = handle.read()
    except OSError as err:
        raise TreeDocumentError(f"cannot read tree document: {err}") from None
    return parse_tree(text, base_dir=os.path.dirname(os.path.abspath(path)))


def serialize_tree(tree: CalcTree) -> dict:
    """Render a CalcTree back into the JSON document structure.

    Round-trip property: parsing the serialized document yields an equal
    CalcTree (sample files are re-read from their recorded paths).
    """
    out = []
    for v in tree.vertices:
        entry: dict = {"id": v.id, "kind": v.kind, "cost": v.cost}
        if v.children:
            entry["children"] = list(v.children)
        if v.expr is not None:
            entry["expr"] = ex.to_string(v.expr)
        if v.mean is not None:
            entry["mean"] = v.mean
            entry["variance"] = v.variance
        if v.samples_file is not None:
            entry["samples_file"] = v.samples_file
        out.append(entry)
    return {"vertices": out}


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def validate_tree(tree: CalcTree) -> list[Violation]:
    """Check every structural invariant; an empty list means the tree is valid."""
    violations: list[Violation] = []
    k = tree.k
    ids = [v.id for v in tree.vertices]
    if ids != list(range(1, k + 1)):
        violations.append(
            Violation(None, "vertex ids must be 1..k", f"got {sorted(ids)}")
        )
        return violations  # downstream checks assume contiguous ids

    m = tree.m
    for v in tree.vertices:
        if v.is_leaf and v.id > m:
            violations.append(
                Violation(v.id, "leaves must precede internal vertices", f"m={m}")
            )
        if not v.is_leaf and v.id <= m:
            violations.append(
                Violation(v.id, "leaves must precede internal vertices", f"m={m}")
            )
    if violations:
        return violations

    root = tree.vertex(k)
    if root.is_leaf:
        violations.append(
            Violation(k, "root must be internal", "a tree needs at least one function vertex")
        )

    seen_parent: dict[int, int] = {}
    for v in tree.vertices:
        if v.is_leaf:
            if v.children:
                violations.append(
                    Violation(v.id, "leaf with inputs", f"children {v.children}")
                )
            if v.expr is not None:
                violations.append(Violation(v.id, "leaf with expression", "unexpected expr"))
            if v.mean is None and v.samples is None:
                violations.append(
                    Violation(
                        v.id,
                        "leaf statistics missing",
                        "need explicit mean/variance or a sample population",
                    )
                )
            if v.variance is not None and v.variance < 0.0:
                violations.append(Violation(v.id, "negative variance", f"{v.variance}"))
            continue

        if not v.children:
            violations.append(
                Violation(v.id, "internal vertex without inputs", "empty child set")
            )
        if len(set(v.children)) != len(v.children):
            violations.append(Violation(v.id, "duplicate input", f"children {v.children}"))
        for c in v.children:
            if not 1 <= c <= k or c >= v.id:
                violations.append(
                    Violation(
                        v.id,
                        "correct-numbering violated",
                        f"child {c} not below vertex {v.id}",
                    )
                )
            elif c in seen_parent:
                violations.append(
                    Violation(
                        c,
                        "multiple outgoing arcs",
                        f"feeds both vertex {seen_parent[c]} and vertex {v.id}",
                    )
                )
            else:
                seen_parent[c] = v.id
        if v.mean is not None or v.samples is not None:
            violations.append(
                Violation(v.id, "internal vertex with leaf data", "unexpected statistics")
            )
        if v.expr is None:
            violations.append(Violation(v.id, "missing expression", "internal vertex needs expr"))
        else:
            used = ex.expression_variables(v.expr)
            declared = set(c for c in v.children if 1 <= c < v.id)
            if used != declared:
                violations.append(
                    Violation(
                        v.id,
                        "expression variables mismatch",
                        f"expression uses {sorted(used)}, children are {sorted(declared)}",
                    )
                )

    for v in tree.vertices:
        if v.id < k and v.id not in seen_parent:
            violations.append(
                Violation(v.id, "unconnected vertex", "no outgoing arc to any parent")
            )
    return violations


# ---------------------------------------------------------------------------
# means and gradients
# ---------------------------------------------------------------------------


def propagate_means(tree: CalcTree) -> dict[int, float]:
    """First-order mean propagation: evaluate each vertex at its child means.

    Leaves use their resolved statistics (explicit values win over estimates
    from attached samples).  Internal vertices are evaluated in increasing id
    order, so each sees only already-computed child means.
    """
    from .variance import leaf_statistics

    stats = leaf_statistics(tree)
    means: dict[int, float] = {}
    for v in tree.vertices:
        if v.is_leaf:
            means[v.id] = stats[v.id][0]
        else:
            env = {c: means[c] for c in v.children}
            try:
                means[v.id] = float(ex.evaluate(v.expr, env))
            except DomainError as err:
                raise DomainError(str(err), vertex=v.id) from None
    return means


def gradient_at_mean(tree: CalcTree, vid: int) -> dict[int, float]:
    """Partial derivatives of vertex ``vid``'s expression at its child means."""
    spec = tree.vertex(vid)
    if spec.is_leaf:
        raise ValueError(f"vertex {vid} is a leaf; gradients exist for internal vertices")
    means = propagate_means(tree)
    env = {c: means[c] for c in spec.children}
    out: dict[int, float] = {}
    for c in spec.children:
        try:
            out[c] = float(ex.evaluate(ex.derivative(spec.expr, c), env))
        except DomainError as err:
            raise DomainError(str(err), vertex=vid) from None
    return out


def tree_gradients(tree: CalcTree) -> dict[int, dict[int, float]]:
    """Gradients for every internal vertex, evaluated at propagated means."""
    means = propagate_means(tree)
    out: dict[int, dict[int, float]] = {}
    for v in tree.vertices:
        if v.is_leaf:
            continue
        env = {c: means[c] for c in v.children}
        grads = {}
        for c in v.children:
            try:
                grads[c] = float(ex.evaluate(ex.derivative(v.expr, c), env))
            except DomainError as err:
                raise DomainError(str(err), vertex=v.id) from None
        out[v.id] = grads
    return out


def compose_root_expression(tree: CalcTree) -> ex.Expr:
    """The root function written directly over leaf variables.

    Substitutes each internal child's expression bottom-up, producing a single
    expression of the leaf inputs (used for second-derivative diagnostics).
    """
    composed: dict[int, ex.Expr] = {}
    for v in tree.vertices:
        if v.is_leaf:
            composed[v.id] = ex.variable(v.id)
        else:
            composed[v.id] = ex.substitute(
                v.expr, {c: composed[c] for c in v.children}
            )
    return composed[tree.k]
