"""Monte Carlo execution of the hierarchical bootstrap.

Two execution modes of the estimator are provided.  The wave algorithm
materializes a resampled population at every internal vertex: each of its
n_v elements is built by drawing one value uniformly with replacement from
every child population and evaluating the vertex function; the estimator is
the mean of the root population.  The sweep baseline instead runs r
independent root evaluations, one leaf draw per input each, with no
intermediate populations.

``replicate`` wraps either a synthetic study (fresh leaf populations drawn
from named distributions every replicate, which is the regime the analytic
variance model describes) or a conditional study on fixed leaf data.

Randomness discipline: a single 64-bit seed is expanded into independent
streams keyed by (seed, replicate index, vertex id) through the Philox
counter-based generator.  Stream 0 of a replicate drives the resampling
indices; stream v drives leaf v's data draw.  Changing one leaf's source
therefore never perturbs another leaf's values, and every run is bit
reproducible from its configuration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import expressions as ex
from .errors import DomainError
from .tree import CalcTree
from .variance import AllocationPlan

__all__ = [
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
]

_MASK64 = (1 << 64) - 1
_MASK32 = (1 << 32) - 1


@dataclass(frozen=True)
class SamplePopulation:
    """The materialized sample attached to one vertex."""

    vertex: int
    values: np.ndarray

    @property
    def size(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class LeafDistribution:
    """A named synthetic source for leaf data.

    Supported: ``normal(mean, variance)``, ``uniform(low, high)``,
    ``exponential(rate)``.
    """

    name: str
    params: tuple[float, ...]

    @classmethod
    def normal(cls, mean: float, variance: float) -> "LeafDistribution":
        if variance < 0.0:
            raise ValueError("invalid distribution: normal variance must be >= 0")
        return cls("normal", (float(mean), float(variance)))

    @classmethod
    def uniform(cls, low: float, high: float) -> "LeafDistribution":
        if not high > low:
            raise ValueError("invalid distribution: uniform needs high > low")
        return cls("uniform", (float(low), float(high)))

    @classmethod
    def exponential(cls, rate: float) -> "LeafDistribution":
        if not rate > 0.0:
            raise ValueError("invalid distribution: exponential rate must be > 0")
        return cls("exponential", (float(rate),))

    def mean(self) -> float:
        if self.name == "normal":
            return self.params[0]
        if self.name == "uniform":
            return 0.5 * (self.params[0] + self.params[1])
        return 1.0 / self.params[0]

    def variance(self) -> float:
        if self.name == "normal":
            return self.params[1]
        if self.name == "uniform":
            return (self.params[1] - self.params[0]) ** 2 / 12.0
        return 1.0 / self.params[0] ** 2

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.name == "normal":
            return rng.normal(self.params[0], math.sqrt(self.params[1]), size)
        if self.name == "uniform":
            return rng.uniform(self.params[0], self.params[1], size)
        return rng.exponential(1.0 / self.params[0], size)


@dataclass(frozen=True)
class ReplicationConfig:
    """Outer Monte Carlo loop settings.

    ``leaf_sources`` maps each leaf id to a LeafDistribution for synthetic
    studies; None selects fixed-data mode, which reuses the sample
    populations attached to the tree's leaves in every replicate.
    """

    replications: int
    seed: int
    plan: AllocationPlan
    leaf_sources: Mapping[int, LeafDistribution] | None = None

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be >= 1")


@dataclass(frozen=True)
class SimulationReport:
    """Replicated estimator values with their summary moments.

    ``variance`` uses the unbiased divisor; ``se_variance`` comes from the
    fourth-central-moment formula for the variance of a sample variance.
    """

    values: np.ndarray
    mean: float
    variance: float
    se_mean: float
    se_variance: float


def stream_rng(seed: int, replicate_index: int, vertex: int) -> np.random.Generator:
    """Independent generator for one (seed, replicate, vertex) triple.

    The triple is packed into a unique 128-bit Philox key, so streams are
    independent by the generator's counter-based design and cheap to create.
    """
    if not 0 <= replicate_index <= _MASK32:
        raise ValueError("replicate index out of range")
    if not 0 <= vertex <= _MASK32:
        raise ValueError("vertex id out of range")
    key = ((seed & _MASK64) << 64) | (replicate_index << 32) | vertex
    return np.random.Generator(np.random.Philox(key=key))


def generate_leaf_population(
    distribution: LeafDistribution,
    size: int,
    rng: np.random.Generator,
    vertex: int = 0,
) -> SamplePopulation:
    """Draw an i.i.d. leaf population of the given size."""
    if size < 1:
        raise ValueError("population size must be >= 1")
    return SamplePopulation(vertex=vertex, values=distribution.sample(rng, size))


def _as_values(pop) -> np.ndarray:
    if isinstance(pop, SamplePopulation):
        return np.asarray(pop.values, dtype=float)
    return np.asarray(pop, dtype=float)


def wave_populations(
    tree: CalcTree,
    plan: AllocationPlan,
    leaf_populations: Mapping[int, "SamplePopulation | np.ndarray"],
    rng: np.random.Generator,
) -> dict[int, np.ndarray]:
    """Run the wave algorithm and return every materialized population.

    Internal vertices are processed in increasing id order; element l of a
    population combines one uniform with-replacement draw per child, each
    child drawn independently.
    """
    pops: dict[int, np.ndarray] = {}
    for leaf in tree.leaf_ids:
        if leaf not in leaf_populations:
            raise ValueError(f"missing population for leaf {leaf}")
        values = _as_values(leaf_populations[leaf])
        if len(values) != plan.size(leaf):
            raise ValueError(
                f"leaf {leaf}: population size {len(values)} does not match "
                f"plan size {plan.size(leaf)}"
            )
        pops[leaf] = values

    for v in tree.vertices:
        if v.is_leaf:
            continue
        n_v = plan.size(v.id)
        env = {}
        for c in v.children:
            source = pops[c]
            env[c] = source[rng.integers(0, len(source), size=n_v)]
        try:
            result = ex.evaluate(v.expr, env)
        except DomainError as err:
            drawn = {f"x{c}": np.round(env[c], 6).tolist() for c in v.children}
            raise DomainError(f"{err} with drawn inputs {drawn}", vertex=v.id) from None
        pops[v.id] = np.broadcast_to(np.asarray(result, dtype=float), (n_v,)).copy()
    return pops


def wave_run(
    tree: CalcTree,
    plan: AllocationPlan,
    leaf_populations: Mapping[int, "SamplePopulation | np.ndarray"],
    rng: np.random.Generator,
) -> float:
    """One wave execution; returns the mean of the root population."""
    pops = wave_populations(tree, plan, leaf_populations, rng)
    return float(pops[tree.k].mean())


def sweep_run(
    tree: CalcTree,
    leaf_populations: Mapping[int, "SamplePopulation | np.ndarray"],
    r: int,
    rng: np.random.Generator,
) -> float:
    """Baseline estimator: r independent full-tree evaluations, averaged.

    Each realization draws one element per leaf population and evaluates the
    vertex functions bottom-up without materializing intermediate
    populations.
    """
    if r < 1:
        raise ValueError("realization count must be >= 1")
    env: dict[int, np.ndarray] = {}
    for leaf in tree.leaf_ids:
        if leaf not in leaf_populations:
            raise ValueError(f"missing population for leaf {leaf}")
        source = _as_values(leaf_populations[leaf])
        env[leaf] = source[rng.integers(0, len(source), size=r)]
    for v in tree.vertices:
        if v.is_leaf:
            continue
        try:
            result = ex.evaluate(v.expr, {c: env[c] for c in v.children})
        except DomainError as err:
            raise DomainError(str(err), vertex=v.id) from None
        env[v.id] = np.broadcast_to(np.asarray(result, dtype=float), (r,))
    return float(env[tree.k].mean())


def _replicate_once(
    tree: CalcTree,
    plan: AllocationPlan,
    leaf_sources: Mapping[int, LeafDistribution] | None,
    fixed_populations: dict[int, np.ndarray] | None,
    seed: int,
    rep: int,
) -> float:
    if leaf_sources is not None:
        pops = {
            leaf: leaf_sources[leaf].sample(stream_rng(seed, rep, leaf), plan.size(leaf))
            for leaf in tree.leaf_ids
        }
    else:
        pops = fixed_populations
    return wave_run(tree, plan, pops, stream_rng(seed, rep, 0))


def replicate(config: ReplicationConfig, tree: CalcTree) -> SimulationReport:
    """Independent replications of the wave estimator.

    In synthetic mode every replicate regenerates all leaf populations from
    the configured distributions, so the spread of the replicate values
    reflects both the data draw and the resampling; that is the randomness
    the analytic variance model describes.  In fixed-data mode the leaf
    populations stay pinned to the tree's attached samples and only the
    resampling varies.
    """
    plan = config.plan
    if len(plan.sizes) != tree.k:
        raise ValueError(f"invalid allocation: expected {tree.k} sizes")

    fixed = None
    if config.leaf_sources is None:
        fixed = {}
        for leaf in tree.leaf_ids:
            spec = tree.vertex(leaf)
            if spec.samples is None:
                raise ValueError(
                    f"leaf {leaf} has no attached samples; fixed-data mode needs them"
                )
            values = np.asarray(spec.samples, dtype=float)
            if len(values) != plan.size(leaf):
                raise ValueError(
                    f"leaf {leaf}: plan size {plan.size(leaf)} does not match "
                    f"data size {len(values)}"
                )
            fixed[leaf] = values
    else:
        missing = set(tree.leaf_ids) - set(config.leaf_sources)
        if missing:
            raise ValueError(f"missing leaf sources for {sorted(missing)}")

    values = np.empty(config.replications)
    for rep in range(config.replications):
        values[rep] = _replicate_once(
            tree, plan, config.leaf_sources, fixed, config.seed, rep
        )
    return summarize_replicates(values)


def summarize_replicates(values: np.ndarray) -> SimulationReport:
    """Assemble a report from raw replicate values."""
    values = np.asarray(values, dtype=float)
    n = len(values)
    mean = float(values.mean())
    if n < 2:
        return SimulationReport(values, mean, math.nan, math.nan, math.nan)
    var = float(values.var(ddof=1))
    centered = values - mean
    m4 = float(np.mean(centered**4))
    var_of_var = (m4 - (n - 3) / (n - 1) * var * var) / n
    return SimulationReport(
        values=values,
        mean=mean,
        variance=var,
        se_mean=math.sqrt(var / n),
        se_variance=math.sqrt(max(var_of_var, 0.0)),
    )
