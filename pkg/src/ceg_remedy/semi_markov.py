"""Semi-Markov failure/repair process on an event tree.

From a situation ``i`` the process picks the out-edge ``j`` with probability
``theta_ij`` and then waits a Weibull holding time drawn from the edge's
cluster law, i.e. the renewal kernel ``Q_ij(t) = theta_ij * f_ij(t)``.
Units cycle root-to-leaf repeatedly; after a failure a remedy is applied,
its indicator sampled, and the next cycle starts at the vertex chosen by
:func:`~ceg_remedy.intervention.reset_vertex`.

With ``drift`` enabled the remedy also moves the generating parameters of
the following cycles: the responsive edges governed by a remedied root cause
have their probabilities divided by ``1 + omega`` (then renormalised) and
their holding scales multiplied by ``1 + beta``.  The regime lasts until the
unit's next remedy.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from ceg_remedy.errors import ConfigInvalid, ModelError
from ceg_remedy.intervention import (
    InterventionIndicator,
    RemedyClass,
    RemedySpec,
    edge_control,
    indicator_distribution,
    reset_vertex,
)
from ceg_remedy.tree_core import (
    EventTree,
    HoldingTimeLaw,
    StagedTree,
    build_staged_tree,
    canonical_partition,
    enumerate_failure_paths,
    root_cause_vertex,
    root_scope,
)

__all__ = [
    "HoldingTimeLaw", "SemiMarkovModel", "Regime", "RemedyPolicy", "Step", "RemedyEvent",
    "Cycle", "UnitHistory", "Dataset", "GenConfig", "sample_transition", "simulate_unit",
    "generate_dataset", "unit_generator",
]


@dataclass(frozen=True)
class SemiMarkovModel:
    tree: EventTree
    root_causes: Tuple[str, ...]
    stages: Tuple[Tuple[str, ...], ...]
    holding_clusters: Tuple[Tuple[str, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "root_causes", tuple(self.root_causes))
        object.__setattr__(self, "stages", build_staged_tree(self.tree, self.stages).stages)
        object.__setattr__(self, "holding_clusters",
                           canonical_partition(self.holding_clusters, [e.id for e in self.tree.edges]))
        enumerate_failure_paths(self.tree, self.root_causes)
        root_cause_vertex(self.tree, self.root_causes)

        timed = {e.id for e in self.tree.edges if e.holding is not None}
        seen = set()
        for cluster in self.holding_clusters:
            laws = set()
            for eid in cluster:
                if eid not in timed:
                    raise ModelError(f"clustered edge {eid} has no holding law", edge=eid)
                if eid in seen:
                    raise ModelError(f"edge {eid} in two holding clusters", edge=eid)
                seen.add(eid)
                laws.add(self.tree.edge[eid].holding)
            if len(laws) > 1:
                raise ModelError("edges of one holding cluster have different laws",
                                 cluster=list(cluster))
        if seen != timed:
            raise ModelError("holding clusters do not cover every timed edge",
                             missing=sorted(timed - seen))

    @cached_property
    def staged(self) -> StagedTree:
        return StagedTree(self.tree, self.stages)

    @cached_property
    def cluster_of(self) -> Dict[str, int]:
        return {eid: i for i, c in enumerate(self.holding_clusters) for eid in c}

    @cached_property
    def control(self) -> Dict[str, int]:
        return edge_control(self.tree, self.root_causes)

    @cached_property
    def root_cause_vertex(self) -> str:
        return root_cause_vertex(self.tree, self.root_causes)

    @cached_property
    def scope(self) -> Dict[str, int]:
        return root_scope(self.tree, self.root_causes)

    @property
    def timed_edges(self) -> Tuple[str, ...]:
        return tuple(e.id for e in self.tree.edges if e.holding is not None)

    def cluster_law(self, cluster: int) -> HoldingTimeLaw:
        return self.tree.edge[self.holding_clusters[cluster][0]].holding

    def realized_root(self, start: str, edges: Sequence[str]) -> Optional[str]:
        """Root cause behind a cycle that started at ``start`` and took ``edges``."""
        rc = set(self.root_causes)
        for eid in edges:
            if eid in rc:
                return eid
        k = self.scope.get(start)
        return None if k is None else self.root_causes[k]


@dataclass(frozen=True)
class Regime:
    """Indicator bits of the unit's latest remedy plus the realised strengths."""

    bits: Tuple[int, ...]
    omega: Mapping[str, float] = field(default_factory=dict)
    beta: Mapping[str, float] = field(default_factory=dict)

    def theta(self, model: SemiMarkovModel, vertex: str) -> np.ndarray:
        out = model.tree.out_edges[vertex]
        theta = np.array([e.theta for e in out])
        on = np.array([e.id in model.control and self.bits[model.control[e.id]] == 1 for e in out])
        if not on.any():
            return theta
        w = np.where(on, 1.0 / (1.0 + self.omega[vertex]), 1.0)
        return theta * w / (theta * w).sum()

    def scale_factor(self, model: SemiMarkovModel, edge_id: str) -> float:
        k = model.control.get(edge_id)
        if k is None or not self.bits[k]:
            return 1.0
        return 1.0 + self.beta[model.tree.edge[edge_id].tail]


def sample_transition(model: SemiMarkovModel, vertex: str, rng: np.random.Generator,
                      regime: Optional[Regime] = None, size: Optional[int] = None):
    """Draw the next edge and its holding time from ``vertex``.

    Returns ``(edge_id, time)``, or two arrays when ``size`` is given.
    Instantaneous edges have holding time 0.
    """
    out = model.tree.out_edges[vertex]
    theta = regime.theta(model, vertex) if regime is not None else np.array([e.theta for e in out])
    cdf = np.cumsum(theta)
    cdf[-1] = 1.0
    n = 1 if size is None else size
    idx = np.searchsorted(cdf, rng.random(n), side="right")
    times = np.zeros(n)
    for k, e in enumerate(out):
        if e.holding is None:
            continue
        hit = idx == k
        m = int(hit.sum())
        if m:
            scale = e.holding.scale * (regime.scale_factor(model, e.id) if regime else 1.0)
            times[hit] = scale * rng.weibull(e.holding.shape, m)
    if size is None:
        return out[int(idx[0])].id, float(times[0])
    return np.array([out[i].id for i in idx]), times


@dataclass(frozen=True)
class RemedyPolicy:
    """Which remedy a group applies after a failure, by realized root cause."""

    by_root_cause: Mapping[str, RemedySpec] = field(default_factory=dict)
    default: Optional[RemedySpec] = None

    def choose(self, realized_root: Optional[str], failed: bool) -> Optional[RemedySpec]:
        if not failed:
            return None
        return self.by_root_cause.get(realized_root, self.default)


@dataclass(frozen=True)
class Step:
    edge: str
    holding_time: float


@dataclass(frozen=True)
class RemedyEvent:
    remedy_id: str
    remedy_class: RemedyClass
    # None when the log does not record which root causes were fixed
    indicator: Optional[InterventionIndicator]
    reset_vertex: str
    pending: bool = False


@dataclass(frozen=True)
class Cycle:
    start: str
    steps: Tuple[Step, ...]
    failed: bool
    remedy: Optional[RemedyEvent] = None

    @property
    def edges(self) -> Tuple[str, ...]:
        return tuple(s.edge for s in self.steps)


@dataclass(frozen=True)
class UnitHistory:
    unit_id: int
    group_id: int
    cycles: Tuple[Cycle, ...]


@dataclass(frozen=True)
class Dataset:
    units: Tuple[UnitHistory, ...]
    root_causes: Tuple[str, ...]

    @property
    def n_cycles(self) -> int:
        return sum(len(u.cycles) for u in self.units)

    def has_remedies(self) -> bool:
        return any(c.remedy is not None for u in self.units for c in u.cycles)


def _draw_strengths(model: SemiMarkovModel, remedy: RemedySpec, rng: np.random.Generator):
    omega_all = remedy.omega.sample(rng)
    beta_all = remedy.beta.sample(rng)
    omega = {v: (remedy.omega_by_vertex[v].sample(rng) if v in remedy.omega_by_vertex else omega_all)
             for v in model.tree.internal}
    beta = {v: (remedy.beta_by_vertex[v].sample(rng) if v in remedy.beta_by_vertex else beta_all)
            for v in model.tree.internal}
    return omega, beta


def simulate_unit(model: SemiMarkovModel, remedy_policy: Optional[RemedyPolicy], n_cycles: int,
                  rng: np.random.Generator, unit_id: int = 0, group_id: int = 0,
                  drift: bool = True) -> UnitHistory:
    if n_cycles < 1:
        raise ConfigInvalid("n_cycles must be at least 1")
    tree = model.tree
    start, regime = tree.root, None
    cycles: List[Cycle] = []
    for c in range(n_cycles):
        v, steps = start, []
        while not tree.is_leaf(v):
            eid, t = sample_transition(model, v, rng, regime if drift else None)
            steps.append(Step(eid, t))
            v = tree.edge[eid].head
        failed = tree.edge[steps[-1].edge].failure
        realized = model.realized_root(start, [s.edge for s in steps])
        event, next_start = None, tree.root
        remedy = remedy_policy.choose(realized, failed) if (remedy_policy and c < n_cycles - 1) else None
        if remedy is not None:
            dist = indicator_distribution(remedy, model.root_causes)
            probs = np.cumsum([p for _, p in dist.support])
            pick = min(int(np.searchsorted(probs, rng.random() * probs[-1], side="right")),
                       len(dist.support) - 1)
            ind = dist.support[pick][0]
            reset = reset_vertex(remedy.remedy_class, realized, ind.covers(realized), tree)
            event = RemedyEvent(remedy.id, remedy.remedy_class, ind, reset.vertex,
                                reset.pending_maintenance)
            next_start = reset.vertex
            omega, beta = _draw_strengths(model, remedy, rng)
            regime = Regime(ind.bits, omega, beta)
        cycles.append(Cycle(start, tuple(steps), failed, event))
        start = next_start
    return UnitHistory(unit_id, group_id, tuple(cycles))


@dataclass(frozen=True)
class GenConfig:
    model: SemiMarkovModel
    n_units: int
    n_groups: int = 10
    cycles_per_unit: int = 10
    # cycled over the groups; empty means no remedies are ever applied
    group_policies: Tuple[RemedyPolicy, ...] = ()
    seed: int = 0
    drift: bool = True

    def __post_init__(self):
        if self.n_units < 1 or self.n_groups < 1 or self.cycles_per_unit < 1:
            raise ConfigInvalid("unit, group and cycle counts must be positive")
        if self.n_groups > self.n_units:
            raise ConfigInvalid("more groups than units")


def unit_generator(seed: int, *key: int) -> np.random.Generator:
    """Independent stream for ``(seed, *key)``; unrelated to draw order."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


def generate_dataset(config: GenConfig, seed: Optional[int] = None) -> Dataset:
    """Simulate ``n_units`` units split evenly into ``n_groups`` groups.

    Each unit draws from its own stream derived from ``(seed, unit_id)``.
    """
    seed = config.seed if seed is None else seed
    units = []
    for uid in range(config.n_units):
        gid = uid * config.n_groups // config.n_units
        policy = config.group_policies[gid % len(config.group_policies)] if config.group_policies else None
        units.append(simulate_unit(config.model, policy, config.cycles_per_unit,
                                   unit_generator(seed, uid), uid, gid, config.drift))
    return Dataset(tuple(units), config.model.root_causes)
