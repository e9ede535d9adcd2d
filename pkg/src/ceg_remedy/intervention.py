"""Remedial interventions on a chain event graph.

A remedy ``r*`` observed after a failure is perfect, imperfect or uncertain.
Its effect on the model is carried by a binary intervention indicator over
the root-cause edges: which root causes the remedy actually fixed.  The
indicator is known for perfect remedies and random otherwise; its law is a
mixture over the actions an engineer may have taken, each action assigning
an independent Beta-distributed remediation probability to every root cause.

Given an indicator, two maps move the model's hyperparameters:

* ``apply_g`` shrinks the Dirichlet mass of remedied edges,
  ``alpha_e / (1 + omega * I_e)``;
* ``apply_j`` stretches the Weibull scale of remedied edges by ``1 + beta``.

Both are the identity when the indicator is all zeros or the strength is 0.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from ceg_remedy.errors import (
    EmptyActionSet,
    NonpositiveBeta,
    NonpositiveOmega,
    RemedyError,
    UnknownRootCause,
    ZeroRootProbability,
)
from ceg_remedy.tree_core import (
    EventTree,
    HoldingTimeLaw,
    PathPartition,
    block_failure_probabilities,
    enumerate_failure_paths,
    path_probability,
    root_cause_vertex,
    root_scope,
)

PROB_TOL = 1e-9


class RemedyClass(str, Enum):
    PERFECT = "perfect"
    IMPERFECT = "imperfect"
    UNCERTAIN = "uncertain"


@dataclass(frozen=True)
class BetaLaw:
    a: float
    b: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise RemedyError("Beta parameters must be positive", a=self.a, b=self.b)

    @property
    def mean(self) -> float:
        return self.a / (self.a + self.b)


@dataclass(frozen=True)
class Strength:
    """An intervention strength, either fixed or log-normal
    (``mean_log``/``sd_log`` of the underlying normal)."""

    value: Optional[float] = None
    mean_log: Optional[float] = None
    sd_log: Optional[float] = None

    def __post_init__(self):
        if self.value is None and (self.mean_log is None or self.sd_log is None):
            raise RemedyError("strength needs a value or log-normal parameters")
        if self.value is None and not self.sd_log > 0:
            raise RemedyError("log-normal sd_log must be positive", sd_log=self.sd_log)

    @property
    def is_random(self) -> bool:
        return self.value is None

    def sample(self, rng: np.random.Generator) -> float:
        if self.value is not None:
            return self.value
        return float(rng.lognormal(self.mean_log, self.sd_log))

    def quadrature(self, n: int = 32) -> Tuple[np.ndarray, np.ndarray]:
        """Nodes and weights integrating a function of the strength over its law."""
        if self.value is not None:
            return np.array([self.value]), np.array([1.0])
        x, w = np.polynomial.hermite_e.hermegauss(n)
        return np.exp(self.mean_log + self.sd_log * x), w / w.sum()


@dataclass(frozen=True)
class ActionSpec:
    """One action ``x^a`` a remedy may consist of.

    ``gamma_conditioned`` holds the remedy-conditioned Beta laws used for
    imperfect remedies, ``gamma_agnostic`` the remedy-agnostic laws used for
    uncertain ones.  A root cause missing from a mapping is never remedied by
    the action.
    """

    id: str
    probability: float
    gamma_conditioned: Mapping[str, BetaLaw] = field(default_factory=dict)
    gamma_agnostic: Mapping[str, BetaLaw] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise RemedyError(f"action {self.id} probability outside [0, 1]")


@dataclass(frozen=True)
class RemedySpec:
    id: str
    remedy_class: RemedyClass
    targeted_roots: Tuple[str, ...] = ()
    actions: Tuple[ActionSpec, ...] = ()
    omega: Strength = Strength(1.0)
    beta: Strength = Strength(1.0)
    omega_by_vertex: Mapping[str, Strength] = field(default_factory=dict)
    beta_by_vertex: Mapping[str, Strength] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "remedy_class", RemedyClass(self.remedy_class))
        object.__setattr__(self, "targeted_roots", tuple(self.targeted_roots))
        object.__setattr__(self, "actions", tuple(self.actions))
        if self.remedy_class is RemedyClass.PERFECT and not self.targeted_roots:
            raise RemedyError(f"perfect remedy {self.id} targets no root cause")
        if self.remedy_class is not RemedyClass.PERFECT:
            if not self.actions:
                raise EmptyActionSet(f"remedy {self.id} has no actions", remedy=self.id)
            total = math.fsum(a.probability for a in self.actions)
            if abs(total - 1.0) > PROB_TOL:
                raise RemedyError(f"action probabilities of {self.id} sum to {total}")
        for s in (self.omega, *self.omega_by_vertex.values()):
            if s.value is not None and s.value < 0:
                raise NonpositiveOmega(f"negative omega on remedy {self.id}")
        for s in (self.beta, *self.beta_by_vertex.values()):
            if s.value is not None and s.value < 0:
                raise NonpositiveBeta(f"negative beta on remedy {self.id}")

    def omega_for(self, vertex: str) -> Strength:
        return self.omega_by_vertex.get(vertex, self.omega)

    def beta_for(self, vertex: str) -> Strength:
        return self.beta_by_vertex.get(vertex, self.beta)


@dataclass(frozen=True)
class InterventionIndicator:
    bits: Tuple[int, ...]
    root_causes: Tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "bits", tuple(int(b) for b in self.bits))
        object.__setattr__(self, "root_causes", tuple(self.root_causes))
        if len(self.bits) != len(self.root_causes):
            raise RemedyError("indicator length differs from number of root causes")
        if any(b not in (0, 1) for b in self.bits):
            raise RemedyError("indicator bits must be 0 or 1")

    def bitstring(self) -> str:
        return "".join(map(str, self.bits))

    @classmethod
    def from_bitstring(cls, s: str, root_causes: Sequence[str]) -> "InterventionIndicator":
        return cls(tuple(int(c) for c in s), tuple(root_causes))

    def covers(self, root_cause: str) -> bool:
        return bool(self.bits[self.root_causes.index(root_cause)])

    @property
    def is_zero(self) -> bool:
        return not any(self.bits)


@dataclass(frozen=True)
class IndicatorDistribution:
    support: Tuple[Tuple[InterventionIndicator, float], ...]

    def __post_init__(self):
        total = math.fsum(p for _, p in self.support)
        if abs(total - 1.0) > PROB_TOL:
            raise RemedyError(f"indicator probabilities sum to {total}")
        keys = [ind.bits for ind, _ in self.support]
        if len(set(keys)) != len(keys):
            raise RemedyError("indicator support entries are not distinct")

    def probability(self, indicator: InterventionIndicator) -> float:
        for ind, p in self.support:
            if ind.bits == indicator.bits:
                return p
        return 0.0

    def as_dict(self) -> Dict[str, float]:
        return {ind.bitstring(): p for ind, p in self.support}


def make_indicator(remedy: RemedySpec, root_causes: Sequence[str]) -> InterventionIndicator:
    root_causes = tuple(root_causes)
    unknown = set(remedy.targeted_roots) - set(root_causes)
    if unknown:
        raise UnknownRootCause(f"remedy {remedy.id} targets unknown root causes",
                               edges=sorted(unknown))
    targeted = set(remedy.targeted_roots)
    return InterventionIndicator(tuple(int(e in targeted) for e in root_causes), root_causes)


def remediation_means(action: ActionSpec, remedy_class: RemedyClass,
                      root_causes: Sequence[str]) -> np.ndarray:
    laws = action.gamma_conditioned if remedy_class is RemedyClass.IMPERFECT else action.gamma_agnostic
    unknown = set(laws) - set(root_causes)
    if unknown:
        raise UnknownRootCause(f"action {action.id} names unknown root causes", edges=sorted(unknown))
    return np.array([laws[e].mean if e in laws else 0.0 for e in root_causes])


def indicator_distribution(remedy: RemedySpec, root_causes: Sequence[str]) -> IndicatorDistribution:
    """Law of the intervention indicator under ``do(remedy)``.

    Integrating the Beta remediation probabilities against independent
    Bernoulli bits leaves only the Beta means, so each action contributes a
    product of Bernoulli(mean) terms.
    """
    root_causes = tuple(root_causes)
    if remedy.remedy_class is RemedyClass.PERFECT:
        return IndicatorDistribution(((make_indicator(remedy, root_causes), 1.0),))
    if not remedy.actions:
        raise EmptyActionSet(f"remedy {remedy.id} has no actions", remedy=remedy.id)

    means = [(a.probability, remediation_means(a, remedy.remedy_class, root_causes))
             for a in remedy.actions]
    support = []
    for bits in itertools.product((0, 1), repeat=len(root_causes)):
        b = np.array(bits)
        p = math.fsum(pa * float(np.prod(np.where(b == 1, m, 1.0 - m))) for pa, m in means)
        if p > 0.0:
            support.append((InterventionIndicator(bits, root_causes), p))
    return IndicatorDistribution(tuple(support))


# ----------------------------------------------------------- g and J maps

IndicatorLike = Union[InterventionIndicator, Sequence[int], np.ndarray]


def _bits(indicator: IndicatorLike) -> np.ndarray:
    if isinstance(indicator, InterventionIndicator):
        return np.array(indicator.bits, dtype=float)
    return np.asarray(indicator, dtype=float)


def apply_g(alpha_v, indicator: IndicatorLike, omega_v: float) -> np.ndarray:
    """Dirichlet hyperparameters after intervention: ``alpha / (1 + omega * I)``."""
    if omega_v < 0:
        raise NonpositiveOmega("omega must be nonnegative", omega=omega_v)
    alpha = np.asarray(alpha_v, dtype=float)
    bits = _bits(indicator)
    if alpha.shape != bits.shape:
        raise RemedyError("indicator not aligned with alpha", alpha=alpha.shape, bits=bits.shape)
    return alpha / (1.0 + omega_v * bits)


def apply_j(eta_v: Sequence[HoldingTimeLaw], indicator: IndicatorLike, beta_v: float) -> list:
    """Holding-time laws after intervention: remedied scales times ``1 + beta``."""
    if beta_v < 0:
        raise NonpositiveBeta("beta must be nonnegative", beta=beta_v)
    bits = _bits(indicator)
    if len(eta_v) != len(bits):
        raise RemedyError("indicator not aligned with holding laws")
    return [law.scaled(1.0 + beta_v) if b else law for law, b in zip(eta_v, bits)]


def edge_control(tree: EventTree, root_causes: Sequence[str]) -> Dict[str, int]:
    """Root-cause index governing each intervention-responsive edge.

    A root-cause edge answers to its own bit; a ``sensitive`` edge downstream
    of a root cause answers to that root cause's bit.
    """
    scope = root_scope(tree, root_causes)
    control = {eid: k for k, eid in enumerate(root_causes)}
    for e in tree.edges:
        if e.sensitive and e.id not in control and e.tail in scope:
            control[e.id] = scope[e.tail]
    return control


def local_indicator(tree: EventTree, vertex: str, indicator: InterventionIndicator,
                    control: Optional[Mapping[str, int]] = None) -> np.ndarray:
    """Edge-level bits for the out-edges of ``vertex``."""
    if control is None:
        control = edge_control(tree, indicator.root_causes)
    return np.array([indicator.bits[control[e.id]] if e.id in control else 0
                     for e in tree.out_edges[vertex]], dtype=float)


def _root_alpha(model, prior) -> Tuple[str, np.ndarray]:
    v = root_cause_vertex(model.tree, model.root_causes)
    if prior is not None:
        return v, np.asarray(prior.alpha[v], dtype=float)
    return v, np.asarray(model.tree.theta_vector(v), dtype=float)


def intervened_root_distribution(model, remedy: RemedySpec, prior=None) -> np.ndarray:
    """Distribution over the out-edges of the root-cause vertex after ``do(remedy)``.

    Mixes the Dirichlet means of ``g(alpha, I, omega)`` over the indicator law
    (and over omega when it is random).  Without a prior the tree's own
    thetas stand in for alpha, so the identity intervention reproduces them.
    """
    v, alpha = _root_alpha(model, prior)
    dist = indicator_distribution(remedy, model.root_causes)
    control = edge_control(model.tree, model.root_causes)
    nodes, weights = remedy.omega_for(v).quadrature()
    out = np.zeros_like(alpha)
    for ind, p in dist.support:
        bits = local_indicator(model.tree, v, ind, control)
        for omega, w in zip(nodes, weights):
            a = apply_g(alpha, bits, omega)
            out += p * w * a / a.sum()
    return out / out.sum()


def reweighted_failure_probability(tree: EventTree, partition: PathPartition,
                                   root_probs: Mapping[str, float]) -> float:
    """Failure probability when the root-cause edges' conditional
    probabilities are replaced by ``root_probs`` and every other conditional
    is left alone."""
    v = root_cause_vertex(tree, partition.root_causes)
    reach = path_probability(tree, tree.path_to(v))
    blocks = block_failure_probabilities(tree, partition)
    total = []
    for eid, fail in zip(partition.root_causes, blocks):
        idle = reach * tree.edge[eid].theta
        if idle == 0.0:
            if partition.block(eid):
                raise ZeroRootProbability(f"root cause {eid} has zero probability", edge=eid)
            continue
        total.append(fail / idle * reach * root_probs[eid])
    return math.fsum(total)


def intervened_failure_probability(model, remedy: RemedySpec, prior=None) -> float:
    partition = enumerate_failure_paths(model.tree, model.root_causes)
    v = root_cause_vertex(model.tree, model.root_causes)
    dist = intervened_root_distribution(model, remedy, prior)
    probs = {e.id: p for e, p in zip(model.tree.out_edges[v], dist)}
    return reweighted_failure_probability(model.tree, partition, probs)


class ResetOutcome(NamedTuple):
    vertex: str
    pending_maintenance: bool


def reset_vertex(remedy_class: RemedyClass, realized_root_cause: str, remediated: bool,
                 tree: EventTree) -> ResetOutcome:
    """Where the next cycle starts after a remedy.

    A perfect remedy, or any remedy that fixed the realized root cause,
    returns the unit to the root.  Otherwise the unit restarts just after the
    root cause occurred; for an uncertain remedy follow-up maintenance is
    flagged as pending.
    """
    remedy_class = RemedyClass(remedy_class)
    if remedy_class is RemedyClass.PERFECT or remediated:
        return ResetOutcome(tree.root, False)
    head = tree.edge[realized_root_cause].head
    return ResetOutcome(head, remedy_class is RemedyClass.UNCERTAIN)
