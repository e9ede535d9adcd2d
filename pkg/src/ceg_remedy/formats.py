"""Readers and writers for the model, remedy and trajectory file formats.

Model file (JSON)::

    {"vertices": [...], "root": "v0",
     "edges": [{"id", "from", "to", "label", "theta",
                "holding": {"shape", "scale"} | null,
                "failure": bool, "sensitive": bool}],
     "root_cause_edges": [...], "stages": [[...]], "holding_clusters": [[...]],
     "remedies": [...], "group_policies": [...]}       # last two optional

Trajectory file (CSV), one row per traversed edge; the remedy columns are
filled on the last row of a cycle that was followed by a remedy::

    unit_id,group_id,cycle,step,edge_id,holding_time,remedy_id,remedy_class,sampled_indicator
"""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

from ceg_remedy.errors import ConfigInvalid, DatasetError, ModelError, RemedyError
from ceg_remedy.intervention import (
    ActionSpec,
    BetaLaw,
    InterventionIndicator,
    RemedyClass,
    RemedySpec,
    Strength,
)
from ceg_remedy.semi_markov import (
    Cycle,
    Dataset,
    RemedyEvent,
    RemedyPolicy,
    SemiMarkovModel,
    Step,
    UnitHistory,
)
from ceg_remedy.tree_core import validate_tree

PathLike = Union[str, Path]

CSV_HEADER = ["unit_id", "group_id", "cycle", "step", "edge_id", "holding_time",
              "remedy_id", "remedy_class", "sampled_indicator"]


def read_json(path: PathLike) -> Any:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"{path}: not valid JSON ({exc})") from exc


def write_json(obj: Any, path: PathLike) -> None:
    Path(path).write_text(dumps(obj))


def dumps(obj: Any) -> str:
    # repr-based float output keeps every value round-trip exact
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# --------------------------------------------------------------------- model

def model_from_dict(raw: Mapping) -> SemiMarkovModel:
    tree = validate_tree(raw)
    try:
        stages = raw.get("stages") or [[v] for v in tree.internal]
        covered = {v for s in stages for v in s}
        stages = [list(s) for s in stages] + [[v] for v in tree.internal if v not in covered]
        clusters = raw.get("holding_clusters")
        if clusters is None:
            clusters = [[e.id] for e in tree.edges if e.holding is not None]
        return SemiMarkovModel(tree, tuple(raw["root_cause_edges"]), tuple(map(tuple, stages)),
                               tuple(map(tuple, clusters)))
    except KeyError as exc:
        raise ModelError(f"model file lacks {exc}") from exc


def model_to_dict(model: SemiMarkovModel) -> Dict[str, Any]:
    edges = []
    for e in model.tree.edges:
        edges.append({
            "id": e.id, "from": e.tail, "to": e.head, "label": e.label, "theta": e.theta,
            "holding": {"shape": e.holding.shape, "scale": e.holding.scale} if e.holding else None,
            "failure": e.failure, "sensitive": e.sensitive,
        })
    return {
        "vertices": list(model.tree.vertices),
        "root": model.tree.root,
        "edges": edges,
        "root_cause_edges": list(model.root_causes),
        "stages": [list(s) for s in model.stages],
        "holding_clusters": [list(c) for c in model.holding_clusters],
    }


def load_model(path: PathLike) -> SemiMarkovModel:
    return model_from_dict(read_json(path))


# ------------------------------------------------------------------- remedies

def _strength(raw, default: float = 1.0) -> Strength:
    if raw is None:
        return Strength(default)
    if isinstance(raw, (int, float)):
        return Strength(float(raw))
    return Strength(mean_log=float(raw["mean_log"]), sd_log=float(raw["sd_log"]))


def _strength_to_raw(s: Strength):
    return s.value if s.value is not None else {"mean_log": s.mean_log, "sd_log": s.sd_log}


def remedy_from_dict(raw: Mapping) -> RemedySpec:
    try:
        actions = []
        for a in raw.get("actions", []):
            gamma = a.get("gamma", {})
            actions.append(ActionSpec(
                id=str(a["id"]),
                probability=float(a["probability"]),
                gamma_conditioned={e: BetaLaw(*g["conditioned"]) for e, g in gamma.items() if "conditioned" in g},
                gamma_agnostic={e: BetaLaw(*g["agnostic"]) for e, g in gamma.items() if "agnostic" in g},
            ))
        return RemedySpec(
            id=str(raw["id"]),
            remedy_class=RemedyClass(raw["class"]),
            targeted_roots=tuple(raw.get("targeted_roots", ())),
            actions=tuple(actions),
            omega=_strength(raw.get("omega")),
            beta=_strength(raw.get("beta")),
            omega_by_vertex={v: _strength(s) for v, s in raw.get("omega_by_vertex", {}).items()},
            beta_by_vertex={v: _strength(s) for v, s in raw.get("beta_by_vertex", {}).items()},
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, RemedyError):
            raise
        raise RemedyError(f"malformed remedy description: {exc!r}") from exc


def remedy_to_dict(remedy: RemedySpec) -> Dict[str, Any]:
    actions = []
    for a in remedy.actions:
        gamma: Dict[str, Dict[str, list]] = {}
        for e, law in a.gamma_conditioned.items():
            gamma.setdefault(e, {})["conditioned"] = [law.a, law.b]
        for e, law in a.gamma_agnostic.items():
            gamma.setdefault(e, {})["agnostic"] = [law.a, law.b]
        actions.append({"id": a.id, "probability": a.probability, "gamma": gamma})
    return {
        "id": remedy.id,
        "class": remedy.remedy_class.value,
        "targeted_roots": list(remedy.targeted_roots),
        "actions": actions,
        "omega": _strength_to_raw(remedy.omega),
        "beta": _strength_to_raw(remedy.beta),
        "omega_by_vertex": {v: _strength_to_raw(s) for v, s in remedy.omega_by_vertex.items()},
        "beta_by_vertex": {v: _strength_to_raw(s) for v, s in remedy.beta_by_vertex.items()},
    }


def remedies_from_raw(raw) -> Dict[str, RemedySpec]:
    """Accepts a single remedy object, a list, or ``{"remedies": [...]}``."""
    if isinstance(raw, Mapping) and "remedies" in raw:
        raw = raw["remedies"]
    if isinstance(raw, Mapping):
        raw = [raw]
    out = {}
    for r in raw:
        spec = remedy_from_dict(r)
        out[spec.id] = spec
    return out


def policies_from_raw(raw: Sequence[Mapping], remedies: Mapping[str, RemedySpec]) -> Tuple[RemedyPolicy, ...]:
    def get(rid):
        if rid is None:
            return None
        if rid not in remedies:
            raise ConfigInvalid(f"policy names unknown remedy {rid}")
        return remedies[rid]

    return tuple(RemedyPolicy({e: get(r) for e, r in p.get("by_root_cause", {}).items()},
                              get(p.get("default"))) for p in raw)


def policies_to_raw(policies: Sequence[RemedyPolicy]) -> List[Dict[str, Any]]:
    return [{"by_root_cause": {e: r.id for e, r in p.by_root_cause.items()},
             "default": p.default.id if p.default else None} for p in policies]


# -------------------------------------------------------------- trajectories

def dataset_to_csv(dataset: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for u in dataset.units:
        for ci, c in enumerate(u.cycles):
            for si, s in enumerate(c.steps):
                last = si == len(c.steps) - 1
                r = c.remedy if last else None
                w.writerow([u.unit_id, u.group_id, ci, si, s.edge, repr(float(s.holding_time)),
                            r.remedy_id if r else "", r.remedy_class.value if r else "",
                            r.indicator.bitstring() if r and r.indicator else ""])
    return buf.getvalue()


def write_dataset(dataset: Dataset, path: PathLike) -> None:
    Path(path).write_text(dataset_to_csv(dataset))


def dataset_from_csv(text: str, model: SemiMarkovModel) -> Dataset:
    tree = model.tree
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != CSV_HEADER:
        raise DatasetError("unexpected trajectory header", header=reader.fieldnames)
    units: Dict[int, Dict[str, Any]] = {}
    for lineno, row in enumerate(reader, start=2):
        try:
            uid, gid = int(row["unit_id"]), int(row["group_id"])
            ci, si = int(row["cycle"]), int(row["step"])
            t = float(row["holding_time"])
        except (TypeError, ValueError) as exc:
            raise DatasetError(f"line {lineno}: {exc}") from exc
        if row["edge_id"] not in tree.edge:
            raise DatasetError(f"line {lineno}: unknown edge {row['edge_id']}")
        if t < 0:
            raise DatasetError(f"line {lineno}: negative holding time")
        unit = units.setdefault(uid, {"group": gid, "cycles": {}})
        cyc = unit["cycles"].setdefault(ci, {"steps": [], "remedy": None})
        if si != len(cyc["steps"]):
            raise DatasetError(f"line {lineno}: steps out of order")
        cyc["steps"].append(Step(row["edge_id"], t))
        if row["remedy_id"]:
            cyc["remedy"] = (row["remedy_id"], row["remedy_class"], row["sampled_indicator"])

    out = []
    for uid in sorted(units):
        raw_cycles = units[uid]["cycles"]
        starts = [tree.edge[raw_cycles[ci]["steps"][0].edge].tail for ci in sorted(raw_cycles)]
        cycles = []
        for k, ci in enumerate(sorted(raw_cycles)):
            steps = tuple(raw_cycles[ci]["steps"])
            at = starts[k]
            for s in steps:
                if tree.edge[s.edge].tail != at:
                    raise DatasetError(f"unit {uid} cycle {ci}: disconnected edges")
                at = tree.edge[s.edge].head
            if not tree.is_leaf(at):
                raise DatasetError(f"unit {uid} cycle {ci}: does not end at a leaf")
            event = None
            if raw_cycles[ci]["remedy"]:
                rid, rclass, bits = raw_cycles[ci]["remedy"]
                if k + 1 >= len(starts):
                    raise DatasetError(f"unit {uid}: remedy after the final cycle")
                rclass = RemedyClass(rclass)
                reset = starts[k + 1]
                event = RemedyEvent(rid, rclass,
                                    InterventionIndicator.from_bitstring(bits, model.root_causes) if bits else None,
                                    reset, rclass is RemedyClass.UNCERTAIN and reset != tree.root)
            cycles.append(Cycle(starts[k], steps, tree.edge[steps[-1].edge].failure, event))
        out.append(UnitHistory(uid, units[uid]["group"], tuple(cycles)))
    return Dataset(tuple(out), model.root_causes)


def read_dataset(path: PathLike, model: SemiMarkovModel) -> Dataset:
    return dataset_from_csv(Path(path).read_text(), model)


# ---------------------------------------------------------- fit outputs

def posterior_to_dict(post) -> Dict[str, Any]:
    return {
        "mode": post.mode.value,
        "iters": post.iters,
        "burnin": post.burnin,
        "stages": [{"members": list(s.members), "labels": list(s.labels), "mean": list(s.mean),
                    "sd": list(s.sd), "alpha": list(s.alpha)} for s in post.stages],
        "clusters": [{"edges": list(c.edges), "shape_mean": c.shape_mean, "scale_mean": c.scale_mean,
                      "mean_time": c.mean_time, "mean_time_sd": c.mean_time_sd,
                      "shape_samples": list(c.shape_samples), "scale_samples": list(c.scale_samples),
                      "acceptance": c.acceptance, "ess": c.ess} for c in post.clusters],
        "expected_counts": {v: list(c) for v, c in post.expected_counts.items()},
        "indicator_frequencies": {r: dict(f) for r, f in post.indicator_frequencies.items()},
    }


def posterior_from_dict(raw: Mapping):
    from ceg_remedy.inference import ClusterPosterior, FitMode, PosteriorSummary, StagePosterior
    try:
        return PosteriorSummary(
            mode=FitMode(raw["mode"]), iters=int(raw["iters"]), burnin=int(raw["burnin"]),
            stages=tuple(StagePosterior(tuple(s["members"]), tuple(s["labels"]), tuple(s["mean"]),
                                        tuple(s["sd"]), tuple(s["alpha"])) for s in raw["stages"]),
            clusters=tuple(ClusterPosterior(tuple(c["edges"]), c["shape_mean"], c["scale_mean"],
                                            c["mean_time"], c["mean_time_sd"], tuple(c["shape_samples"]),
                                            tuple(c["scale_samples"]), c["acceptance"], c["ess"])
                           for c in raw["clusters"]),
            expected_counts={v: tuple(c) for v, c in raw["expected_counts"].items()},
            indicator_frequencies={r: dict(f) for r, f in raw["indicator_frequencies"].items()},
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigInvalid(f"malformed posterior file: {exc!r}") from exc


def posterior_alpha(post, tree) -> Dict[str, Tuple[float, ...]]:
    """Per-situation Dirichlet parameters of a posterior, in tree out-edge order.

    Every member of a stage shares the stage's parameters.
    """
    out = {}
    for s in post.stages:
        by_label = dict(zip(s.labels, s.alpha))
        for v in s.members:
            out[v] = tuple(by_label[e.label] for e in tree.out_edges[v])
    return out


def structure_to_dict(sel) -> Dict[str, Any]:
    return {
        "stages": [list(b) for b in sel.stages],
        "clusters": [list(b) for b in sel.clusters],
        "score": sel.score,
        "stage_score": sel.stage_score,
        "holding_score": sel.holding_score,
        "merges": [{"kind": m.kind, "left": list(m.left), "right": list(m.right), "gain": m.gain}
                   for m in sel.merges],
    }


def structure_from_dict(raw: Mapping):
    from ceg_remedy.structure_learning import CandidatePartition, Merge
    try:
        return CandidatePartition(
            tuple(tuple(b) for b in raw["stages"]), tuple(tuple(b) for b in raw["clusters"]),
            float(raw["score"]), float(raw.get("stage_score", 0.0)), float(raw.get("holding_score", 0.0)),
            tuple(Merge(m["kind"], tuple(m["left"]), tuple(m["right"]), float(m["gain"]))
                  for m in raw.get("merges", ())))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigInvalid(f"malformed structure file: {exc!r}") from exc
