import math

import numpy as np
import pytest

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
from ceg_remedy.tree_core import (
    Edge,
    EventTree,
    HoldingTimeLaw,
    build_ceg,
    build_staged_tree,
    enumerate_failure_paths,
    failure_probability,
    path_probability,
    root_cause_vertex,
    root_to_leaf_paths,
    singleton_stages,
    validate_tree,
)
from oracles import oracle_positions
from random_trees import maximal_stages, random_stages, random_tree


def raw_tree(edges, vertices=None, root="r"):
    if vertices is None:
        vertices = sorted({e[1] for e in edges} | {e[2] for e in edges} | {root})
    return {"vertices": vertices, "root": root,
            "edges": [{"id": i, "from": a, "to": b, "label": lab, "theta": th}
                      for i, a, b, lab, th in edges]}


def test_holding_law_mean_and_rate():
    law = HoldingTimeLaw(2.0, 3.0)
    assert law.rate == pytest.approx(1 / 9)
    assert law.mean == pytest.approx(3.0 * math.gamma(1.5))
    with pytest.raises(ModelError):
        HoldingTimeLaw(0.0, 1.0)


def test_validate_rejects_bad_trees():
    with pytest.raises(ThetaNotNormalized):
        validate_tree(raw_tree([("e1", "r", "a", "x", 0.5), ("e2", "r", "b", "y", 0.4)]))
    with pytest.raises(DuplicateEdgeLabel):
        validate_tree(raw_tree([("e1", "r", "a", "x", 0.5), ("e2", "r", "b", "x", 0.5)]))
    with pytest.raises(MultipleParents):
        validate_tree(raw_tree([("e1", "r", "a", "x", 0.5), ("e2", "r", "b", "y", 0.5),
                                ("e3", "a", "b", "z", 1.0)]))
    with pytest.raises(CycleDetected):
        validate_tree(raw_tree([("e1", "r", "a", "x", 1.0), ("e2", "b", "c", "y", 1.0),
                                ("e3", "c", "b", "z", 1.0)]))
    with pytest.raises(CycleDetected):
        validate_tree(raw_tree([("e1", "r", "a", "x", 1.0), ("e2", "a", "r", "y", 1.0)]))
    with pytest.raises(ModelError):
        validate_tree({"vertices": ["r"], "root": "r"})


def test_tree_properties():
    t = validate_tree(raw_tree([("e1", "r", "a", "x", 0.3), ("e2", "r", "b", "y", 0.7),
                                ("e3", "a", "c", "x", 0.5), ("e4", "a", "d", "y", 0.5)]))
    assert t.leaves == ("b", "c", "d")
    assert t.internal == ("a", "r")
    assert t.depth == {"r": 0, "a": 1, "b": 1, "c": 2, "d": 2}
    assert t.leaf_count["r"] == 3
    assert t.path_to("d") == ("e1", "e4")
    assert sorted(root_to_leaf_paths(t)) == [("e1", "e3"), ("e1", "e4"), ("e2",)]
    assert path_probability(t, ("e1", "e4")) == pytest.approx(0.15)
    with pytest.raises(DisconnectedPath):
        path_probability(t, ("e3",))


def test_staged_tree_validation():
    t = validate_tree(raw_tree([("e1", "r", "a", "x", 0.5), ("e2", "r", "b", "y", 0.5),
                                ("e3", "a", "c", "p", 0.2), ("e4", "a", "d", "q", 0.8),
                                ("e5", "b", "e", "q", 0.8), ("e6", "b", "f", "p", 0.2)]))
    st = build_staged_tree(t, [["a", "b"], ["r"]])
    # blocks follow the tree's vertex order, which is alphabetical here
    assert st.stages == (("a", "b"), ("r",))
    assert [e.id for e in st.aligned_edges("b")] == ["e6", "e5"]
    assert st.stage_theta(st.stage_of["a"]) == (0.2, 0.8)
    with pytest.raises(IncompatibleStage):
        build_staged_tree(t, [["r", "a", "b"]])
    with pytest.raises(ModelError):
        build_staged_tree(t, [["a"], ["r"]])


def test_ceg_collapses_identical_subtrees():
    t = validate_tree(raw_tree([("e1", "r", "a", "x", 0.5), ("e2", "r", "b", "y", 0.5),
                                ("e3", "a", "c", "p", 0.2), ("e4", "a", "d", "q", 0.8),
                                ("e5", "b", "e", "p", 0.2), ("e6", "b", "f", "q", 0.8)]))
    ceg = build_ceg(build_staged_tree(t, [["a", "b"], ["r"]]))
    assert ("a", "b") in ceg.positions
    sink = ceg.positions[ceg.sink]
    assert set(sink) == set(t.leaves)
    assert len(ceg.edges) == 4
    finest = build_ceg(singleton_stages(t))
    assert ("a",) in finest.positions and ("b",) in finest.positions


@pytest.mark.parametrize("seed", range(40))
def test_ceg_positions_match_isomorphism_oracle(seed):
    rng = np.random.default_rng(seed)
    tree = random_tree(rng)
    stages = maximal_stages(tree) if seed % 2 else random_stages(tree, rng)
    staged = build_staged_tree(tree, stages)
    ceg = build_ceg(staged)
    assert sorted(tuple(sorted(p)) for p in ceg.positions) == oracle_positions(staged)
    assert ceg.as_staged_tree().stages  # positions form a valid staging


def fig_like_tree():
    return validate_tree(raw_tree([
        ("ok", "r", "n", "none", 0.5), ("rc1", "r", "a", "c1", 0.3), ("rc2", "r", "b", "c2", 0.2),
        ("a1", "a", "af", "fail", 0.6), ("a2", "a", "ao", "ok", 0.4),
        ("b1", "b", "bf", "fail", 0.1), ("b2", "b", "bo", "ok", 0.9),
    ]))


def test_failure_paths_grouped_by_root_cause():
    t = fig_like_tree()
    part = enumerate_failure_paths(t, ("rc1", "rc2"), failure_edges=("a1", "b1"))
    assert part.block("rc1") == (("rc1", "a1"),)
    assert part.block("rc2") == (("rc2", "b1"),)
    assert failure_probability(t, part) == pytest.approx(0.3 * 0.6 + 0.2 * 0.1)
    assert root_cause_vertex(t, ("rc1", "rc2")) == "r"
    with pytest.raises(UnattributedFailurePath):
        enumerate_failure_paths(t, ("rc1",), failure_edges=("a1", "b1"))


def test_path_through_two_root_causes_rejected():
    t = validate_tree(raw_tree([("rc1", "r", "a", "x", 1.0), ("rc2", "a", "b", "y", 1.0)]))
    with pytest.raises(PathThroughTwoRootCauses):
        enumerate_failure_paths(t, ("rc1", "rc2"), failure_edges=("rc2",))


def test_root_causes_need_common_tail():
    t = validate_tree(raw_tree([("e1", "r", "a", "x", 0.5), ("e2", "r", "b", "y", 0.5),
                                ("e3", "a", "c", "x", 1.0)]))
    with pytest.raises(ModelError):
        root_cause_vertex(t, ("e2", "e3"))


def test_with_thetas_revalidates():
    t = fig_like_tree()
    t2 = t.with_thetas({"a1": 0.5, "a2": 0.5})
    assert t2.edge["a1"].theta == 0.5
    with pytest.raises(ThetaNotNormalized):
        t.with_thetas({"a1": 0.9})


def test_edge_holding_on_instantaneous_edges_is_optional():
    e = Edge("x", "r", "a", "l", 1.0)
    assert e.holding is None and not e.failure and not e.sensitive
    EventTree(("r", "a"), "r", (e,))
