"""Greedy agglomerative selection of stages and holding-time clusters.

Both searches start from the finest partition and repeatedly merge the
admissible pair with the largest positive gain in log marginal likelihood.
Stages are scored by Dirichlet-multinomial evidence; holding clusters by the
Gamma-Weibull evidence for ``lambda`` at a plug-in maximum-likelihood shape.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import gammaln

from ceg_remedy.errors import (
    ElementSetMismatch,
    EmptyCluster,
    ShapeMismatch,
    ShapeSolverDiverged,
)
from ceg_remedy.inference import HoldingPrior, PosteriorSummary, PriorState, init_prior
from ceg_remedy.semi_markov import Dataset, SemiMarkovModel
from ceg_remedy.tree_core import EventTree, canonical_partition

Partition = Tuple[Tuple[str, ...], ...]


def stage_log_marginal(counts, alpha) -> float:
    counts = np.asarray(counts, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if counts.shape != alpha.shape:
        raise ShapeMismatch("counts not aligned with alpha",
                            counts=list(counts.shape), alpha=list(alpha.shape))
    if (counts < 0).any() or (alpha <= 0).any():
        raise ShapeMismatch("counts must be nonnegative and alpha positive")
    a0, n0 = alpha.sum(), counts.sum()
    return float(gammaln(a0) - gammaln(a0 + n0) + np.sum(gammaln(alpha + counts) - gammaln(alpha)))


def ml_shape(times, tol: float = 1e-8, max_iter: int = 100) -> float:
    """Maximum-likelihood Weibull shape by Newton iteration on the profile score."""
    t = np.asarray(times, dtype=float)
    if t.size == 0:
        raise EmptyCluster("no holding times")
    logt = np.log(t)
    # the shape estimate is scale free; centring keeps t**k well conditioned
    x = logt - logt.mean()
    if t.size < 2 or np.ptp(x) == 0:
        raise ShapeSolverDiverged("shape is unbounded for fewer than two distinct times", n=int(t.size))
    sd = float(x.std())
    k = math.pi / (math.sqrt(6.0) * sd)
    for _ in range(max_iter):
        z = k * x
        w = np.exp(z - z.max())
        s0, s1, s2 = w.sum(), (w * x).sum(), (w * x * x).sum()
        a, b = s1 / s0, s2 / s0
        # score of the profile log-likelihood, divided by n (x has mean zero)
        f = 1.0 / k - a
        df = -1.0 / k ** 2 - (b - a * a)
        step = f / df
        new = k - step
        if new <= 0:
            new = k / 2.0
        if abs(new - k) <= tol * max(1.0, k):
            return float(new)
        k = new
    raise ShapeSolverDiverged("Newton iteration for the shape did not converge", last=k)


def holding_log_marginal(times, prior: HoldingPrior = HoldingPrior(),
                         shape: Optional[float] = None) -> float:
    t = np.asarray(times, dtype=float)
    if t.size == 0:
        raise EmptyCluster("no holding times")
    if (t <= 0).any():
        raise ShapeMismatch("holding times must be positive")
    k = ml_shape(t) if shape is None else float(shape)
    c, d, n = prior.rate_c, prior.rate_d, t.size
    logt = np.log(t)
    z = k * logt
    m = max(float(z.max()), math.log(d))
    log_rate = m + math.log(d * math.exp(-m) + float(np.exp(z - m).sum()))
    return float(gammaln(c + n) - gammaln(c) + c * math.log(d) - (c + n) * log_rate
                 + (k - 1.0) * logt.sum() + n * math.log(k))


def _safe_holding_score(times: np.ndarray, prior: HoldingPrior) -> float:
    try:
        return holding_log_marginal(times, prior)
    except ShapeSolverDiverged:
        # one or tied observations carry no shape information
        return holding_log_marginal(times, prior, shape=1.0)


# ------------------------------------------------------------------ AHC

@dataclass(frozen=True)
class Merge:
    kind: str  # "stage" or "cluster"
    left: Tuple[str, ...]
    right: Tuple[str, ...]
    gain: float


@dataclass(frozen=True)
class CandidatePartition:
    stages: Partition
    clusters: Partition
    score: float
    stage_score: float = 0.0
    holding_score: float = 0.0
    merges: Tuple[Merge, ...] = field(default=(), compare=False)

    def together(self, a: str, b: str) -> bool:
        for block in self.stages + self.clusters:
            if a in block:
                return b in block
        return False


@dataclass
class _Stage:
    members: Tuple[str, ...]
    labels: Tuple[str, ...]
    counts: np.ndarray
    alpha: np.ndarray
    score: float


def _greedy(blocks: List, admissible, merge, key) -> Tuple[List, List[Tuple]]:
    """Merge the best admissible pair until no merge has positive gain."""
    done = []
    cache: Dict[Tuple, Tuple] = {}
    while True:
        best = None
        for i, j in itertools.combinations(range(len(blocks)), 2):
            a, b = blocks[i], blocks[j]
            if not admissible(a, b):
                continue
            ka, kb = sorted((key(a), key(b)))
            if (ka, kb) not in cache:
                cache[(ka, kb)] = merge(a, b)
            merged, gain = cache[(ka, kb)]
            cand = (-gain, ka, kb)
            if gain > 0 and (best is None or cand < best[0]):
                best = (cand, i, j, merged)
        if best is None:
            return blocks, done
        (neg, ka, kb), i, j, merged = best
        done.append((ka, kb, -neg))
        blocks = [blk for k, blk in enumerate(blocks) if k not in (i, j)] + [merged]


def select_stages(tree: EventTree, counts: Mapping[str, Sequence[float]],
                  alpha: Mapping[str, Sequence[float]]) -> Tuple[Partition, float, List[Merge]]:
    """AHC over situations; ``counts`` and ``alpha`` are in tree out-edge order."""
    depth = tree.depth
    blocks = []
    for v in tree.internal:
        labels = tuple(sorted(e.label for e in tree.out_edges[v]))
        pos = {e.label: k for k, e in enumerate(tree.out_edges[v])}
        c = np.array([counts[v][pos[lab]] for lab in labels], dtype=float)
        a = np.array([alpha[v][pos[lab]] for lab in labels], dtype=float)
        blocks.append(_Stage((v,), labels, c, a, stage_log_marginal(c, a)))

    def admissible(a, b):
        return a.labels == b.labels and depth[a.members[0]] == depth[b.members[0]]

    def merge(a, b):
        c, al = a.counts + b.counts, a.alpha + b.alpha
        sc = stage_log_marginal(c, al)
        return _Stage(tuple(sorted(a.members + b.members)), a.labels, c, al, sc), sc - a.score - b.score

    blocks, trace = _greedy(blocks, admissible, merge, lambda s: s.members)
    part = canonical_partition([b.members for b in blocks], tree.internal)
    return part, float(sum(b.score for b in blocks)), [Merge("stage", a, b, g) for a, b, g in trace]


@dataclass
class _Cluster:
    members: Tuple[str, ...]
    depth: int
    times: np.ndarray
    score: float


def select_clusters(tree: EventTree, times: Mapping[str, np.ndarray],
                    prior: HoldingPrior = HoldingPrior()) -> Tuple[Partition, float, List[Merge]]:
    """AHC over duration-bearing edges; only edges whose tails share a depth merge."""
    depth = tree.depth
    timed = [e.id for e in tree.edges if e.holding is not None]
    blocks, empty = [], []
    for eid in timed:
        t = np.asarray(times.get(eid, ()), dtype=float)
        if t.size == 0:
            empty.append((eid,))
            continue
        blocks.append(_Cluster((eid,), depth[tree.edge[eid].tail], t, _safe_holding_score(t, prior)))

    def merge(a, b):
        t = np.concatenate([a.times, b.times])
        sc = _safe_holding_score(t, prior)
        return _Cluster(tuple(sorted(a.members + b.members)), a.depth, t, sc), sc - a.score - b.score

    blocks, trace = _greedy(blocks, lambda a, b: a.depth == b.depth, merge, lambda c: c.members)
    part = canonical_partition([b.members for b in blocks] + empty, timed)
    return part, float(sum(b.score for b in blocks)), [Merge("cluster", a, b, g) for a, b, g in trace]


def raw_counts(dataset: Dataset, tree: EventTree) -> Dict[str, Tuple[float, ...]]:
    pos = {e.id: (e.tail, k) for v in tree.internal for k, e in enumerate(tree.out_edges[v])}
    out = {v: [0.0] * len(tree.out_edges[v]) for v in tree.internal}
    for u in dataset.units:
        for c in u.cycles:
            for s in c.steps:
                v, k = pos[s.edge]
                out[v][k] += 1.0
    return {v: tuple(c) for v, c in out.items()}


def raw_times(dataset: Dataset, tree: EventTree) -> Dict[str, np.ndarray]:
    out: Dict[str, List[float]] = {e.id: [] for e in tree.edges if e.holding is not None}
    for u in dataset.units:
        for c in u.cycles:
            for s in c.steps:
                if s.edge in out:
                    out[s.edge].append(s.holding_time)
    return {e: np.asarray(t, dtype=float) for e, t in out.items()}


def ahc_select(source: Union[Dataset, PosteriorSummary], model: SemiMarkovModel,
               prior: Optional[PriorState] = None) -> CandidatePartition:
    """Select stages and holding clusters for ``model``'s tree.

    ``source`` is either a posterior (its expected base-regime counts and
    de-intervened holding times are used) or a raw dataset.
    """
    tree = model.tree
    prior = prior or init_prior(tree)
    if isinstance(source, PosteriorSummary):
        counts, times = source.expected_counts, source.edge_times or {}
    else:
        counts, times = raw_counts(source, tree), raw_times(source, tree)
    stages, s_score, s_trace = select_stages(tree, counts, prior.alpha)
    clusters, h_score, h_trace = select_clusters(tree, times, prior.holding)
    return CandidatePartition(stages, clusters, s_score + h_score, s_score, h_score,
                              tuple(s_trace + h_trace))


# ------------------------------------------------------------ comparison

def _labels(partition: Iterable[Iterable[str]]) -> Dict[str, int]:
    out = {}
    for i, block in enumerate(partition):
        for x in block:
            if x in out:
                raise ElementSetMismatch(f"element {x} appears in two blocks")
            out[x] = i
    return out


def pair_disagreement(a: Iterable[Iterable[str]], b: Iterable[Iterable[str]]) -> Tuple[int, int]:
    """Number of element pairs grouped differently by ``a`` and ``b``, and the pair count."""
    la, lb = _labels(a), _labels(b)
    if set(la) != set(lb):
        raise ElementSetMismatch("partitions cover different elements",
                                 only_left=sorted(set(la) - set(lb)), only_right=sorted(set(lb) - set(la)))
    xs = sorted(la)
    n = len(xs)
    if n < 2:
        return 0, 0
    ia = np.array([la[x] for x in xs])
    ib = np.array([lb[x] for x in xs])
    same_a = ia[:, None] == ia[None, :]
    same_b = ib[:, None] == ib[None, :]
    upper = np.triu(np.ones((n, n), dtype=bool), 1)
    return int((same_a != same_b)[upper].sum()), n * (n - 1) // 2


def partition_distance(estimated, truth) -> float:
    """Fraction of element pairs whose grouping differs.

    Accepts two plain partitions or two :class:`CandidatePartition` objects;
    for the latter the stage pairs and cluster pairs are pooled.
    """
    if isinstance(estimated, CandidatePartition) or isinstance(truth, CandidatePartition):
        d1, n1 = pair_disagreement(estimated.stages, truth.stages)
        d2, n2 = pair_disagreement(estimated.clusters, truth.clusters)
        d, n = d1 + d2, n1 + n2
    else:
        d, n = pair_disagreement(estimated, truth)
    return d / n if n else 0.0


def truth_partition(model: SemiMarkovModel) -> CandidatePartition:
    return CandidatePartition(model.stages, model.holding_clusters, math.nan)


@dataclass(frozen=True)
class MergeReport:
    """Share of replicates in which each tracked pair ended up in one block."""

    proportions: Mapping[str, float]
    n_replicates: int

    def __getitem__(self, key: str) -> float:
        return self.proportions[key]


def pair_key(a: str, b: str) -> str:
    return "+".join(sorted((a, b)))


def tracked_pairs(model: SemiMarkovModel) -> List[Tuple[str, str]]:
    """All pairs grouped together by the model's stages and holding clusters."""
    out = []
    for block in model.stages + model.holding_clusters:
        out.extend(itertools.combinations(sorted(block), 2))
    return out


def merge_proportions(selections: Sequence[CandidatePartition],
                      pairs: Sequence[Tuple[str, str]]) -> MergeReport:
    n = len(selections)
    props = {}
    for a, b in pairs:
        hits = sum(sel.together(a, b) for sel in selections)
        props[pair_key(a, b)] = hits / n if n else 0.0
    return MergeReport(dict(sorted(props.items())), n)
