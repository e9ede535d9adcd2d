"""Command-line entry point: ``ceg-remedy <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ceg_remedy.errors import CegError, ConfigInvalid
from ceg_remedy.experiment import default_model_path, load_config, run_experiment
from ceg_remedy.formats import (
    dumps,
    model_from_dict,
    policies_from_raw,
    posterior_alpha,
    posterior_from_dict,
    posterior_to_dict,
    read_dataset,
    read_json,
    remedies_from_raw,
    structure_to_dict,
    write_dataset,
)
from ceg_remedy.inference import FitSettings, PriorState, fit, init_prior
from ceg_remedy.intervention import (
    indicator_distribution,
    intervened_failure_probability,
    intervened_root_distribution,
)
from ceg_remedy.semi_markov import GenConfig, generate_dataset
from ceg_remedy.structure_learning import ahc_select
from ceg_remedy.tree_core import enumerate_failure_paths, failure_probability

logger = logging.getLogger("ceg_remedy")


def _load(model_path, remedies_path=None):
    raw = read_json(model_path)
    model = model_from_dict(raw)
    remedies = remedies_from_raw(read_json(remedies_path)) if remedies_path else \
        remedies_from_raw(raw.get("remedies", []))
    return model, remedies, raw


def _emit(obj, out: Optional[str]) -> None:
    text = dumps(obj)
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_simulate(args) -> None:
    model, remedies, raw = _load(args.model, args.remedies)
    policies = () if args.no_remedies else policies_from_raw(raw.get("group_policies", []), remedies)
    data = generate_dataset(GenConfig(model, args.units, args.groups, args.cycles, policies, args.seed))
    write_dataset(data, args.out)
    logger.info("wrote %d cycles for %d units to %s", data.n_cycles, args.units, args.out)


def cmd_fit(args) -> None:
    model, remedies, _ = _load(args.model, args.remedies)
    data = read_dataset(args.data, model)
    prior = init_prior(model.tree, args.phantom)
    settings = FitSettings(args.iters, args.burnin, args.indicator_mode)
    post = fit(data, model, args.mode, prior, settings, np.random.default_rng(args.seed), remedies=remedies)
    _emit(posterior_to_dict(post), args.out)


def cmd_select(args) -> None:
    model, remedies, _ = _load(args.model, args.remedies)
    data = read_dataset(args.data, model)
    prior = init_prior(model.tree, args.phantom)
    if args.raw_counts:
        source = data
    else:
        settings = FitSettings(args.iters, args.burnin)
        source = fit(data, model, args.mode, prior, settings, np.random.default_rng(args.seed),
                     remedies=remedies)
    _emit(structure_to_dict(ahc_select(source, model, prior)), args.out)


def cmd_intervene(args) -> None:
    model, remedies, _ = _load(args.model, args.remedy)
    if args.remedy_id:
        if args.remedy_id not in remedies:
            raise ConfigInvalid(f"no remedy {args.remedy_id}")
        chosen = [remedies[args.remedy_id]]
    else:
        chosen = list(remedies.values())
    if not chosen:
        raise ConfigInvalid("no remedy given")
    prior = None
    if args.prior:
        post = posterior_from_dict(read_json(args.prior))
        prior = PriorState(posterior_alpha(post, model.tree))
    partition = enumerate_failure_paths(model.tree, model.root_causes)
    v = model.root_cause_vertex
    out = {"idle_failure_probability": failure_probability(model.tree, partition), "remedies": {}}
    for remedy in chosen:
        root = intervened_root_distribution(model, remedy, prior)
        out["remedies"][remedy.id] = {
            "root_distribution": {e.id: float(p) for e, p in zip(model.tree.out_edges[v], root)},
            "failure_probability": intervened_failure_probability(model, remedy, prior),
            "indicator_distribution": indicator_distribution(remedy, model.root_causes).as_dict(),
        }
    _emit(out, args.out)


def cmd_experiment(args) -> None:
    config = load_config(args.config)
    if args.seed is not None:
        config = type(config)(**{**config.to_dict(), "seed": args.seed})
    out = args.out or config.out
    if not out:
        raise ConfigInvalid("no output directory")
    report = run_experiment(config, out, args.threads)
    logger.info("report with %d cells written to %s", len(report.cells), out)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ceg-remedy", description="Remedy-aware chain event graph toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_default: Optional[int] = 0):
        sp.add_argument("--seed", type=int, default=seed_default)
        sp.add_argument("--threads", type=int, default=1)

    s = sub.add_parser("simulate", help="generate a trajectory CSV")
    s.add_argument("--model", default=str(default_model_path()))
    s.add_argument("--remedies")
    s.add_argument("--units", type=int, required=True)
    s.add_argument("--groups", type=int, default=10)
    s.add_argument("--cycles", type=int, default=10)
    s.add_argument("--no-remedies", action="store_true", help="never apply remedies")
    s.add_argument("--out", required=True)
    common(s)
    s.set_defaults(func=cmd_simulate)

    def fit_args(sp):
        sp.add_argument("--model", default=str(default_model_path()))
        sp.add_argument("--remedies")
        sp.add_argument("--data", required=True)
        sp.add_argument("--mode", choices=("intervened", "idle"), default="intervened")
        sp.add_argument("--phantom", type=float, default=1.0)
        sp.add_argument("--iters", type=int, default=5000)
        sp.add_argument("--burnin", type=int, default=1000)
        sp.add_argument("--out")
        common(sp)

    f = sub.add_parser("fit", help="posterior of stage probabilities and holding laws")
    fit_args(f)
    f.add_argument("--indicator-mode", choices=("sample", "plugin"), default="sample")
    f.set_defaults(func=cmd_fit)

    se = sub.add_parser("select", help="agglomerative structure selection")
    fit_args(se)
    se.add_argument("--raw-counts", action="store_true", help="score raw counts instead of a fit")
    se.set_defaults(func=cmd_select)

    i = sub.add_parser("intervene", help="root and failure probabilities under a remedy")
    i.add_argument("--model", default=str(default_model_path()))
    i.add_argument("--remedy", help="remedy JSON; defaults to the remedies in the model file")
    i.add_argument("--remedy-id")
    i.add_argument("--prior", help="posterior JSON whose stage parameters serve as the prior")
    i.add_argument("--out")
    common(i)
    i.set_defaults(func=cmd_intervene)

    e = sub.add_parser("experiment", help="replicated intervened-versus-idle comparison")
    e.add_argument("--config", required=True)
    e.add_argument("--out")
    common(e, seed_default=None)
    e.set_defaults(func=cmd_experiment)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    level = os.environ.get("CEG_REMEDY_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except CegError as exc:
        sys.stderr.write(json.dumps(exc.to_dict(), sort_keys=True) + "\n")
        return exc.exit_status
    except (OSError, ValueError) as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 2
    except Exception as exc:  # noqa: BLE001 - last-resort runtime failure
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
