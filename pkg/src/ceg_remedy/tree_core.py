"""Event trees, staged trees and chain event graphs.

The three classes form a hierarchy: an :class:`EventTree` carries the
topology and edge probabilities, a :class:`StagedTree` adds a colouring of
the situations (internal vertices) into stages, and a
:class:`ChainEventGraph` is the quotient of a staged tree by positions with
every leaf collapsed into one sink.

All objects are immutable after construction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

from scipy.special import gamma as gamma_fn

from ceg_remedy.errors import (
    CycleDetected,
    DisconnectedPath,
    DuplicateEdgeLabel,
    IncompatibleStage,
    ModelError,
    MultipleParents,
    PathThroughTwoRootCauses,
    ThetaNotNormalized,
    UnattributedFailurePath,
)

THETA_TOL = 1e-9


@dataclass(frozen=True)
class HoldingTimeLaw:
    """Weibull holding time with density ``shape * rate * t**(shape-1) * exp(-rate * t**shape)``
    where ``rate = scale**-shape``."""

    shape: float
    scale: float

    def __post_init__(self):
        if not (self.shape > 0 and self.scale > 0):
            raise ModelError("Weibull shape and scale must be positive",
                             shape=self.shape, scale=self.scale)

    @property
    def rate(self) -> float:
        return self.scale ** (-self.shape)

    @property
    def mean(self) -> float:
        return self.scale * float(gamma_fn(1.0 + 1.0 / self.shape))

    def scaled(self, factor: float) -> "HoldingTimeLaw":
        return HoldingTimeLaw(self.shape, self.scale * factor)


@dataclass(frozen=True)
class Edge:
    id: str
    tail: str
    head: str
    label: str
    theta: float
    holding: Optional[HoldingTimeLaw] = None
    # head is a leaf at which the unit has failed
    failure: bool = False
    # probability / holding time of this edge responds to a remedy of the
    # root cause above it
    sensitive: bool = False


@dataclass(frozen=True)
class EventTree:
    vertices: Tuple[str, ...]
    root: str
    edges: Tuple[Edge, ...]

    def __post_init__(self):
        object.__setattr__(self, "vertices", tuple(self.vertices))
        object.__setattr__(self, "edges", tuple(self.edges))
        _check_tree(self)

    @cached_property
    def edge(self) -> Dict[str, Edge]:
        return {e.id: e for e in self.edges}

    @cached_property
    def out_edges(self) -> Dict[str, Tuple[Edge, ...]]:
        out: Dict[str, List[Edge]] = {v: [] for v in self.vertices}
        for e in self.edges:
            out[e.tail].append(e)
        return {v: tuple(es) for v, es in out.items()}

    @cached_property
    def in_edge(self) -> Dict[str, Edge]:
        return {e.head: e for e in self.edges}

    @cached_property
    def leaves(self) -> Tuple[str, ...]:
        return tuple(v for v in self.vertices if not self.out_edges[v])

    @cached_property
    def internal(self) -> Tuple[str, ...]:
        return tuple(v for v in self.vertices if self.out_edges[v])

    @cached_property
    def depth(self) -> Dict[str, int]:
        depth = {self.root: 0}
        for v in self.preorder:
            for e in self.out_edges[v]:
                depth[e.head] = depth[v] + 1
        return depth

    @cached_property
    def preorder(self) -> Tuple[str, ...]:
        order, stack = [], [self.root]
        while stack:
            v = stack.pop()
            order.append(v)
            stack.extend(e.head for e in reversed(self.out_edges[v]))
        return tuple(order)

    @cached_property
    def leaf_count(self) -> Dict[str, int]:
        """Number of root-to-leaf paths through each vertex's subtree."""
        count: Dict[str, int] = {}
        for v in reversed(self.preorder):
            kids = self.out_edges[v]
            count[v] = sum(count[e.head] for e in kids) if kids else 1
        return count

    def is_leaf(self, v: str) -> bool:
        return not self.out_edges[v]

    def theta_vector(self, v: str) -> Tuple[float, ...]:
        return tuple(e.theta for e in self.out_edges[v])

    def descendants(self, v: str) -> Tuple[str, ...]:
        out, stack = [], [v]
        while stack:
            u = stack.pop()
            out.append(u)
            stack.extend(e.head for e in self.out_edges[u])
        return tuple(out)

    def path_to(self, v: str) -> Tuple[str, ...]:
        """Edge ids from the root to ``v``."""
        path = []
        while v != self.root:
            e = self.in_edge[v]
            path.append(e.id)
            v = e.tail
        return tuple(reversed(path))

    def with_thetas(self, thetas: Mapping[str, float]) -> "EventTree":
        edges = tuple(replace(e, theta=thetas[e.id]) if e.id in thetas else e
                      for e in self.edges)
        return EventTree(self.vertices, self.root, edges)


def _check_tree(tree: EventTree) -> None:
    vset = set(tree.vertices)
    if len(vset) != len(tree.vertices):
        raise ModelError("duplicate vertex ids")
    if tree.root not in vset:
        raise ModelError("root is not a vertex", root=tree.root)
    ids, parent = set(), {}
    for e in tree.edges:
        if e.id in ids:
            raise ModelError(f"duplicate edge id {e.id}", edge=e.id)
        ids.add(e.id)
        for end in (e.tail, e.head):
            if end not in vset:
                raise ModelError(f"edge {e.id} references unknown vertex {end}",
                                 edge=e.id, vertex=end)
        if not 0.0 <= e.theta <= 1.0:
            raise ModelError(f"edge {e.id} theta outside [0, 1]", edge=e.id, theta=e.theta)
        if e.head == tree.root or e.head == e.tail:
            raise CycleDetected(f"edge {e.id} closes a cycle", edge=e.id)
        if e.head in parent:
            raise MultipleParents(f"vertex {e.head} has more than one parent",
                                  vertex=e.head, edges=[parent[e.head], e.id])
        parent[e.head] = e.id

    children: Dict[str, List[Tuple[str, str]]] = {v: [] for v in tree.vertices}
    for e in tree.edges:
        children[e.tail].append((e.label, e.head))
    seen, stack = {tree.root}, [tree.root]
    while stack:
        v = stack.pop()
        for _, w in children[v]:
            seen.add(w)
            stack.append(w)
    if len(seen) != len(vset):
        # every unreached vertex has a parent, so following parents must loop
        raise CycleDetected("vertices unreachable from root form a cycle",
                            vertices=sorted(vset - seen))

    for v, kids in children.items():
        if not kids:
            continue
        labels = [lab for lab, _ in kids]
        if len(set(labels)) != len(labels):
            raise DuplicateEdgeLabel(f"duplicate edge label out of {v}", vertex=v)
        total = math.fsum(e.theta for e in tree.edges if e.tail == v)
        if abs(total - 1.0) > THETA_TOL:
            raise ThetaNotNormalized(f"thetas out of {v} sum to {total}", vertex=v, sum=total)


def validate_tree(spec: Mapping) -> EventTree:
    """Build an :class:`EventTree` from the ``vertices``/``root``/``edges``
    section of a model description."""
    try:
        edges = []
        for raw in spec["edges"]:
            hold = raw.get("holding")
            edges.append(Edge(
                id=str(raw["id"]),
                tail=str(raw["from"]),
                head=str(raw["to"]),
                label=str(raw["label"]),
                theta=float(raw["theta"]),
                holding=HoldingTimeLaw(float(hold["shape"]), float(hold["scale"])) if hold else None,
                failure=bool(raw.get("failure", False)),
                sensitive=bool(raw.get("sensitive", False)),
            ))
        return EventTree(tuple(str(v) for v in spec["vertices"]), str(spec["root"]), tuple(edges))
    except (KeyError, TypeError) as exc:
        raise ModelError(f"malformed tree description: {exc!r}") from exc


# ---------------------------------------------------------------- staged tree

@dataclass(frozen=True)
class StagedTree:
    tree: EventTree
    stages: Tuple[Tuple[str, ...], ...]

    @cached_property
    def stage_of(self) -> Dict[str, int]:
        return {v: i for i, members in enumerate(self.stages) for v in members}

    def labels(self, stage: int) -> Tuple[str, ...]:
        """Canonical edge-label order of a stage (that of its first member)."""
        return tuple(e.label for e in self.tree.out_edges[self.stages[stage][0]])

    def aligned_edges(self, v: str) -> Tuple[Edge, ...]:
        """Out-edges of ``v`` in the label order of its stage."""
        by_label = {e.label: e for e in self.tree.out_edges[v]}
        return tuple(by_label[lab] for lab in self.labels(self.stage_of[v]))

    def stage_theta(self, stage: int) -> Tuple[float, ...]:
        return tuple(e.theta for e in self.aligned_edges(self.stages[stage][0]))


def canonical_partition(blocks: Iterable[Iterable[str]], order: Sequence[str]) -> Tuple[Tuple[str, ...], ...]:
    """Sort members by ``order`` and blocks by their first member."""
    rank = {v: i for i, v in enumerate(order)}
    sorted_blocks = [tuple(sorted(b, key=rank.__getitem__)) for b in blocks]
    return tuple(sorted((b for b in sorted_blocks if b), key=lambda b: rank[b[0]]))


def build_staged_tree(tree: EventTree, stages: Iterable[Iterable[str]]) -> StagedTree:
    """Validate a stage partition of the internal vertices of ``tree``."""
    stages = [list(s) for s in stages]
    seen: Dict[str, int] = {}
    internal = set(tree.internal)
    for i, members in enumerate(stages):
        for v in members:
            if v not in internal:
                raise ModelError(f"stage member {v} is not an internal vertex", vertex=v)
            if v in seen:
                raise ModelError(f"vertex {v} appears in two stages", vertex=v)
            seen[v] = i
    missing = internal - set(seen)
    if missing:
        raise ModelError("stage partition does not cover every internal vertex",
                         missing=sorted(missing))

    for members in stages:
        first = members[0]
        ref = {e.label: e.theta for e in tree.out_edges[first]}
        for v in members[1:]:
            out = tree.out_edges[v]
            if len(out) != len(ref):
                raise IncompatibleStage(f"{first} and {v} differ in out-degree",
                                        vertices=[first, v], reason="out-degree mismatch")
            for e in out:
                if e.label not in ref:
                    raise IncompatibleStage(f"{first} and {v} have different edge labels",
                                            vertices=[first, v], reason="label mismatch")
                if abs(e.theta - ref[e.label]) > THETA_TOL:
                    raise IncompatibleStage(f"{first} and {v} differ on {e.label!r}",
                                            vertices=[first, v], reason="theta mismatch")
    return StagedTree(tree, canonical_partition(stages, tree.vertices))


def singleton_stages(tree: EventTree) -> StagedTree:
    return StagedTree(tree, tuple((v,) for v in tree.internal))


# ------------------------------------------------------------ chain event graph

@dataclass(frozen=True)
class CegEdge:
    tail: int
    head: int
    label: str
    theta: float


@dataclass(frozen=True)
class ChainEventGraph:
    staged: StagedTree
    positions: Tuple[Tuple[str, ...], ...]
    sink: int
    edges: Tuple[CegEdge, ...]

    @cached_property
    def position_of(self) -> Dict[str, int]:
        return {v: i for i, members in enumerate(self.positions) for v in members}

    def as_staged_tree(self) -> StagedTree:
        """Staged tree whose stages are this graph's (non-sink) positions."""
        blocks = [p for i, p in enumerate(self.positions) if i != self.sink]
        return StagedTree(self.staged.tree, canonical_partition(blocks, self.staged.tree.vertices))


def build_ceg(staged: StagedTree) -> ChainEventGraph:
    """Compute positions bottom-up and merge leaves into a single sink."""
    tree = staged.tree
    key_id: Dict[tuple, int] = {}
    pos: Dict[str, int] = {}
    for v in reversed(tree.preorder):
        if tree.is_leaf(v):
            key: tuple = ("sink",)
        else:
            key = (staged.stage_of[v],
                   tuple(sorted((e.label, pos[e.head]) for e in tree.out_edges[v])))
        pos[v] = key_id.setdefault(key, len(key_id))

    groups: Dict[int, List[str]] = {}
    for v in tree.vertices:
        groups.setdefault(pos[v], []).append(v)
    positions = canonical_partition(groups.values(), tree.vertices)
    index = {p[0]: i for i, p in enumerate(positions)}
    # members were collected in vertex order, so members[0] leads its block
    remap = {pid: index[members[0]] for pid, members in groups.items()}
    sink = remap[pos[tree.leaves[0]]]

    edges = []
    for i, members in enumerate(positions):
        if i == sink:
            continue
        for e in tree.out_edges[members[0]]:
            edges.append(CegEdge(i, remap[pos[e.head]], e.label, e.theta))
    return ChainEventGraph(staged, positions, sink, tuple(edges))


# ------------------------------------------------------------------- paths

def root_to_leaf_paths(tree: EventTree, start: Optional[str] = None) -> Iterator[Tuple[str, ...]]:
    stack = [(start or tree.root, ())]
    while stack:
        v, path = stack.pop()
        out = tree.out_edges[v]
        if not out:
            yield path
            continue
        for e in reversed(out):
            stack.append((e.head, path + (e.id,)))


def path_probability(tree: EventTree, path: Sequence[str], start: Optional[str] = None) -> float:
    """Product of edge thetas along a connected edge sequence anchored at
    ``start`` (the root by default)."""
    at = start or tree.root
    prob = 1.0
    for eid in path:
        e = tree.edge.get(eid)
        if e is None or e.tail != at:
            raise DisconnectedPath(f"edge {eid} does not continue the path at {at}",
                                   edge=eid, vertex=at)
        prob *= e.theta
        at = e.head
    return prob


@dataclass(frozen=True)
class PathPartition:
    """Failure paths grouped by the root cause they pass through."""

    root_causes: Tuple[str, ...]
    failure_paths: Tuple[Tuple[Tuple[str, ...], ...], ...]

    def block(self, root_cause: str) -> Tuple[Tuple[str, ...], ...]:
        return self.failure_paths[self.root_causes.index(root_cause)]

    @property
    def all_paths(self) -> Tuple[Tuple[str, ...], ...]:
        return tuple(p for block in self.failure_paths for p in block)


def enumerate_failure_paths(tree: EventTree, root_causes: Sequence[str],
                            failure_edges: Optional[Sequence[str]] = None) -> PathPartition:
    root_causes = tuple(root_causes)
    for eid in root_causes:
        if eid not in tree.edge:
            raise ModelError(f"unknown root-cause edge {eid}", edge=eid)
    if failure_edges is None:
        failure_edges = [e.id for e in tree.edges if e.failure]
    fail, rc = set(failure_edges), set(root_causes)
    blocks: Dict[str, List[Tuple[str, ...]]] = {eid: [] for eid in root_causes}
    for path in root_to_leaf_paths(tree):
        if not fail.intersection(path):
            continue
        hits = [eid for eid in path if eid in rc]
        if len(hits) > 1:
            raise PathThroughTwoRootCauses("failure path passes several root causes",
                                           path=list(path), root_causes=hits)
        if not hits:
            raise UnattributedFailurePath("failure path passes no root cause", path=list(path))
        blocks[hits[0]].append(path)
    return PathPartition(root_causes, tuple(tuple(blocks[eid]) for eid in root_causes))


def failure_probability(tree: EventTree, partition: PathPartition) -> float:
    return math.fsum(path_probability(tree, p) for p in partition.all_paths)


def block_failure_probabilities(tree: EventTree, partition: PathPartition) -> Tuple[float, ...]:
    return tuple(math.fsum(path_probability(tree, p) for p in block)
                 for block in partition.failure_paths)


def root_cause_vertex(tree: EventTree, root_causes: Sequence[str]) -> str:
    """The single situation whose out-edges carry the root causes."""
    tails = {tree.edge[eid].tail for eid in root_causes}
    if len(tails) != 1:
        raise ModelError("root-cause edges must share one tail vertex", tails=sorted(tails))
    return tails.pop()


def root_scope(tree: EventTree, root_causes: Sequence[str]) -> Dict[str, int]:
    """Index of the root cause above each vertex downstream of one."""
    scope = {}
    for k, eid in enumerate(root_causes):
        for v in tree.descendants(tree.edge[eid].head):
            scope[v] = k
    return scope
