"""Random small event trees for property tests."""
import numpy as np

from ceg_remedy.tree_core import Edge, EventTree, HoldingTimeLaw

LABELS = ("a", "b", "c")


def _random_theta(rng, k):
    return tuple(float(x) for x in rng.dirichlet(np.ones(k)))


def random_tree(rng, max_vertices=12, reuse=0.85, timed=False):
    """Tree with at most ``max_vertices`` vertices.

    Leaves on the frontier are expanded at random; a new situation reuses
    an earlier (labels, thetas) colour with probability ``reuse``, so equal
    stages and equal coloured subtrees are common.
    """
    vertices, edges, frontier = ["v0"], [], ["v0"]
    palette = {2: [], 3: []}
    while frontier:
        room = max_vertices - len(vertices)
        if room < 2 or (len(vertices) > 1 and rng.random() < 0.15):
            break
        v = frontier.pop(int(rng.integers(len(frontier))))
        k = 2 if room < 3 or rng.random() < 0.7 else 3
        if palette[k] and rng.random() < reuse:
            labels, thetas = palette[k][int(rng.integers(len(palette[k])))]
        else:
            labels = tuple(str(x) for x in rng.permutation(LABELS)[:k])
            thetas = _random_theta(rng, k)
            palette[k].append((labels, thetas))
        for lab, th in zip(labels, thetas):
            child = f"v{len(vertices)}"
            vertices.append(child)
            frontier.append(child)
            hold = HoldingTimeLaw(1.0 + float(rng.random()), 1.0 + 4.0 * float(rng.random())) if timed else None
            edges.append(Edge(f"e{v}_{child}", v, child, lab, th, hold))
    return EventTree(tuple(vertices), "v0", tuple(edges))


def maximal_stages(tree):
    """Group situations with identical label-to-theta maps."""
    groups = {}
    for v in tree.internal:
        key = tuple(sorted((e.label, e.theta) for e in tree.out_edges[v]))
        groups.setdefault(key, []).append(v)
    return [tuple(g) for g in groups.values()]


def random_stages(tree, rng):
    """A random coarsening between the finest and the maximal staging."""
    out = []
    for block in maximal_stages(tree):
        block = list(block)
        rng.shuffle(block)
        cut = int(rng.integers(1, len(block) + 1))
        parts = [block[:cut], block[cut:]]
        out.extend(tuple(p) for p in parts if p)
    return out


def random_failure_model(rng, max_vertices=12):
    """Random tree with root causes and failure edges below them.

    Returns ``(tree, root_causes)``.  Half the time the root-cause vertex sits
    one level below an extra root, so it is not the tree's root.
    """
    from dataclasses import replace

    while True:
        base = random_tree(rng, max_vertices - 2)
        if len(base.out_edges["v0"]) >= 2:
            break
    edges = list(base.edges)
    vertices = list(base.vertices)
    root = "v0"
    if rng.random() < 0.5:
        th = float(rng.uniform(0.2, 0.8))
        edges += [Edge("pre", "top", "v0", "go", th), Edge("skip", "top", "idle", "stay", 1.0 - th)]
        vertices = ["top", "idle"] + vertices
        root = "top"
    out0 = [e.id for e in edges if e.tail == "v0"]
    k = int(rng.integers(1, len(out0) + 1))
    root_causes = tuple(sorted(rng.choice(out0, size=k, replace=False).tolist()))
    tree = EventTree(tuple(vertices), root, tuple(edges))
    under = []
    for rc in root_causes:
        for v in tree.descendants(tree.edge[rc].head):
            if tree.is_leaf(v):
                under.append(tree.in_edge[v].id)
    pick = [e for e in under if rng.random() < 0.6] or [under[0]]
    edges = [replace(e, failure=e.id in pick) for e in tree.edges]
    return EventTree(tree.vertices, root, tuple(edges)), root_causes
