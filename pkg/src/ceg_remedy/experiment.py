"""Replicated comparison of intervened and idle fits against a known truth.

For every dataset size, phantom-unit setting and replicate a dataset is
generated once, fitted in both modes on the true structure, and each fit's
expected counts feed the structure search.  Per-replicate results are saved
under ``cells/`` as they finish, so an interrupted run resumes where it
stopped.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import scipy

from ceg_remedy import __version__
from ceg_remedy.errors import ConfigInvalid, StructureMismatch
from ceg_remedy.formats import (
    dumps,
    model_from_dict,
    policies_from_raw,
    read_json,
    remedies_from_raw,
)
from ceg_remedy.inference import FitMode, FitSettings, PosteriorSummary, fit, init_prior
from ceg_remedy.semi_markov import GenConfig, SemiMarkovModel, generate_dataset
from ceg_remedy.structure_learning import (
    CandidatePartition,
    MergeReport,
    ahc_select,
    merge_proportions,
    partition_distance,
    tracked_pairs,
    truth_partition,
)

logger = logging.getLogger(__name__)

MODES = (FitMode.INTERVENED, FitMode.IDLE)


def default_model_path() -> Path:
    return Path(str(resources.files("ceg_remedy") / "data" / "ground_truth_model.json"))


@dataclass(frozen=True)
class ExperimentConfig:
    model: str = ""
    sizes: Tuple[int, ...] = (500, 1000, 3000, 5000, 10000)
    n_groups: int = 10
    cycles_per_unit: int = 10
    replicates: int = 20
    phantom_units: Tuple[float, ...] = (1.0,)
    iters: int = 5000
    burnin: int = 1000
    indicator_mode: str = "sample"
    seed: int = 0
    out: str = ""

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        object.__setattr__(self, "phantom_units", tuple(float(k) for k in self.phantom_units))
        if not self.sizes or any(s <= 0 for s in self.sizes):
            raise ConfigInvalid("sizes must be positive")
        if any(b <= a for a, b in zip(self.sizes, self.sizes[1:])):
            raise ConfigInvalid("sizes must be strictly increasing")
        if self.replicates < 1:
            raise ConfigInvalid("replicates must be at least 1")
        if not self.phantom_units or any(k <= 0 for k in self.phantom_units):
            raise ConfigInvalid("phantom units must be positive")
        if any(s < self.n_groups for s in self.sizes):
            raise ConfigInvalid("every size must be at least the group count")
        FitSettings(self.iters, self.burnin, self.indicator_mode)

    @classmethod
    def from_dict(cls, raw: Mapping, base: Optional[Path] = None) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigInvalid(f"unknown config keys: {sorted(unknown)}")
        raw = dict(raw)
        if raw.get("model") and base is not None and not Path(raw["model"]).is_absolute():
            raw["model"] = str((base / raw["model"]).resolve())
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigInvalid(str(exc)) from exc

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["sizes"] = list(self.sizes)
        d["phantom_units"] = list(self.phantom_units)
        return d

    def model_path(self) -> Path:
        return Path(self.model) if self.model else default_model_path()

    def settings(self) -> FitSettings:
        return FitSettings(self.iters, self.burnin, self.indicator_mode)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return ExperimentConfig.from_dict(read_json(path), base=path.parent)


# ---------------------------------------------------------------- errors

@dataclass(frozen=True)
class ErrorTriple:
    situational: float
    cluster: float
    holding: float

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.situational, self.cluster, self.holding)


def situational_error(posterior: PosteriorSummary, model: SemiMarkovModel) -> float:
    tree = model.tree
    devs = []
    for s in posterior.stages:
        for k, label in enumerate(s.labels):
            per_member = []
            for v in s.members:
                if v not in tree.out_edges:
                    raise StructureMismatch(f"posterior vertex {v} not in model")
                true = {e.label: e.theta for e in tree.out_edges[v]}
                if label not in true:
                    raise StructureMismatch(f"label {label} missing at {v}")
                per_member.append(abs(s.mean[k] - true[label]))
            devs.append(sum(per_member) / len(per_member))
    return float(np.mean(devs))


def holding_error(posterior: PosteriorSummary, model: SemiMarkovModel) -> float:
    devs = []
    for c in posterior.clusters:
        if math.isnan(c.mean_time):
            continue
        per_edge = []
        for eid in c.edges:
            e = model.tree.edge.get(eid)
            if e is None or e.holding is None:
                raise StructureMismatch(f"posterior edge {eid} has no true holding law")
            per_edge.append(abs(c.mean_time - e.holding.mean))
        devs.append(sum(per_edge) / len(per_edge))
    return float(np.mean(devs)) if devs else 0.0


def compute_errors(posterior: PosteriorSummary, selected: CandidatePartition,
                   model: SemiMarkovModel) -> ErrorTriple:
    return ErrorTriple(situational_error(posterior, model),
                       partition_distance(selected, truth_partition(model)),
                       holding_error(posterior, model))


# ------------------------------------------------------------ replicates

def _derive(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=key).generate_state(1, np.uint64)[0])


def dataset_seed(master: int, size: int, replicate: int) -> int:
    return _derive(master, 1, size, replicate)


def fit_seed(master: int, size: int, replicate: int, phantom_index: int, mode: FitMode) -> int:
    return _derive(master, 2, size, replicate, phantom_index, MODES.index(mode))


def _load_truth(path: Path):
    raw = read_json(path)
    model = model_from_dict(raw)
    remedies = remedies_from_raw(raw.get("remedies", []))
    policies = policies_from_raw(raw.get("group_policies", []), remedies)
    return model, remedies, policies


def run_replicate(config: ExperimentConfig, size: int, phantom_index: int, replicate: int) -> Dict[str, Any]:
    """Generate one dataset and evaluate both modes on it."""
    model, remedies, policies = _load_truth(config.model_path())
    gen = GenConfig(model, size, config.n_groups, config.cycles_per_unit, policies,
                    dataset_seed(config.seed, size, replicate))
    data = generate_dataset(gen)
    prior = init_prior(model.tree, config.phantom_units[phantom_index])
    out: Dict[str, Any] = {"size": size, "phantom": config.phantom_units[phantom_index],
                           "replicate": replicate, "modes": {}}
    for mode in MODES:
        rng = np.random.default_rng(fit_seed(config.seed, size, replicate, phantom_index, mode))
        post = fit(data, model, mode, prior, config.settings(), rng, remedies=remedies)
        sel = ahc_select(post, model, prior)
        err = compute_errors(post, sel, model)
        out["modes"][mode.value] = {
            "errors": asdict(err),
            "stages": [list(b) for b in sel.stages],
            "clusters": [list(b) for b in sel.clusters],
        }
    return out


def _cell_path(out_dir: Path, size: int, phantom_index: int, replicate: int) -> Path:
    return out_dir / "cells" / f"n{size}_k{phantom_index}_r{replicate:04d}.json"


def _job(args) -> Tuple[Tuple[int, int, int], Dict[str, Any]]:
    config_dict, size, k, r, out_dir = args
    config = ExperimentConfig(**config_dict)
    result = run_replicate(config, size, k, r)
    if out_dir is not None:
        path = _cell_path(Path(out_dir), size, k, r)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(dumps(result))
        tmp.replace(path)
    return (size, k, r), result


# ---------------------------------------------------------------- report

@dataclass(frozen=True)
class CellSummary:
    size: int
    mode: str
    phantom: float
    n_replicates: int
    merge: MergeReport
    error_mean: ErrorTriple
    error_sd: ErrorTriple


@dataclass(frozen=True)
class ExperimentReport:
    config: Mapping[str, Any]
    cells: Tuple[CellSummary, ...]
    metadata: Mapping[str, Any] = field(default_factory=dict)
    replicates: Tuple[Mapping[str, Any], ...] = field(default=(), compare=False)

    def cell(self, size: int, mode, phantom: Optional[float] = None) -> CellSummary:
        mode = FitMode(mode).value
        for c in self.cells:
            if c.size == size and c.mode == mode and (phantom is None or c.phantom == phantom):
                return c
        raise KeyError((size, mode, phantom))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "config": dict(self.config),
            "metadata": dict(self.metadata),
            "cells": [{
                "size": c.size, "mode": c.mode, "phantom": c.phantom, "n_replicates": c.n_replicates,
                "merge_proportions": dict(c.merge.proportions),
                "error_mean": asdict(c.error_mean), "error_sd": asdict(c.error_sd),
            } for c in self.cells],
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "ExperimentReport":
        try:
            cells = tuple(CellSummary(
                int(c["size"]), str(c["mode"]), float(c["phantom"]), int(c["n_replicates"]),
                MergeReport(dict(c["merge_proportions"]), int(c["n_replicates"])),
                ErrorTriple(**c["error_mean"]), ErrorTriple(**c["error_sd"]),
            ) for c in raw["cells"])
            return cls(dict(raw["config"]), cells, dict(raw.get("metadata", {})))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigInvalid(f"malformed report: {exc!r}") from exc


def read_report(path) -> ExperimentReport:
    return ExperimentReport.from_dict(read_json(path))


def aggregate(config: ExperimentConfig, results: Sequence[Mapping[str, Any]],
              model: SemiMarkovModel) -> ExperimentReport:
    """Summarise replicate results; the outcome does not depend on their order."""
    results = sorted(results, key=lambda r: (r["size"], r["phantom"], r["replicate"]))
    pairs = tracked_pairs(model)
    cells = []
    for size in config.sizes:
        for phantom in config.phantom_units:
            for mode in MODES:
                rows = [r for r in results if r["size"] == size and r["phantom"] == phantom]
                sels = [CandidatePartition(tuple(map(tuple, r["modes"][mode.value]["stages"])),
                                           tuple(map(tuple, r["modes"][mode.value]["clusters"])), math.nan)
                        for r in rows]
                errs = np.array([[r["modes"][mode.value]["errors"][k]
                                  for k in ("situational", "cluster", "holding")] for r in rows])
                sd = errs.std(axis=0, ddof=1) if len(rows) > 1 else np.zeros(3)
                cells.append(CellSummary(size, mode.value, phantom, len(rows),
                                         merge_proportions(sels, pairs),
                                         ErrorTriple(*map(float, errs.mean(axis=0))),
                                         ErrorTriple(*map(float, sd))))
    meta = {
        "master_seed": config.seed,
        "dataset_seeds": {str(s): [dataset_seed(config.seed, s, r) for r in range(config.replicates)]
                          for s in config.sizes},
        "versions": {"ceg_remedy": __version__, "numpy": np.__version__, "scipy": scipy.__version__},
    }
    return ExperimentReport(config.to_dict(), tuple(cells), meta, tuple(results))


def merge_csv(report: ExperimentReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["size", "mode", "phantom", "pair", "proportion"])
    for c in report.cells:
        for pair, p in c.merge.proportions.items():
            w.writerow([c.size, c.mode, repr(c.phantom), pair, repr(p)])
    return buf.getvalue()


def errors_csv(report: ExperimentReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["size", "mode", "phantom", "n_replicates",
                "situational_mean", "situational_sd", "cluster_mean", "cluster_sd",
                "holding_mean", "holding_sd"])
    for c in report.cells:
        m, s = c.error_mean, c.error_sd
        w.writerow([c.size, c.mode, repr(c.phantom), c.n_replicates,
                    repr(m.situational), repr(s.situational), repr(m.cluster), repr(s.cluster),
                    repr(m.holding), repr(s.holding)])
    return buf.getvalue()


def run_experiment(config: ExperimentConfig, out_dir=None, threads: int = 1) -> ExperimentReport:
    """Run every (size, phantom, replicate) job, reusing finished cells."""
    out = Path(out_dir or config.out) if (out_dir or config.out) else None
    if out is not None:
        (out / "cells").mkdir(parents=True, exist_ok=True)
    model, _, _ = _load_truth(config.model_path())
    started = time.perf_counter()

    results, todo = [], []
    for size in config.sizes:
        for k in range(len(config.phantom_units)):
            for r in range(config.replicates):
                path = _cell_path(out, size, k, r) if out is not None else None
                if path is not None and path.exists():
                    results.append(json.loads(path.read_text()))
                else:
                    todo.append((config.to_dict(), size, k, r, str(out) if out is not None else None))
    logger.info("%d replicate jobs to run, %d resumed", len(todo), len(results))

    if threads > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for _, res in pool.map(_job, todo):
                results.append(res)
    else:
        for args in todo:
            key, res = _job(args)
            logger.info("finished size=%d phantom=%d replicate=%d", *key)
            results.append(res)

    report = aggregate(config, results, model)
    if out is not None:
        (out / "report.json").write_text(dumps(report.to_dict()))
        (out / "merge_proportions.csv").write_text(merge_csv(report))
        (out / "errors.csv").write_text(errors_csv(report))
        (out / "timing.json").write_text(dumps({"wall_seconds": time.perf_counter() - started,
                                                "jobs_run": len(todo)}))
    return report
