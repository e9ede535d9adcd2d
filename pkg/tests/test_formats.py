import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ceg_remedy.errors import ConfigInvalid, DatasetError, ModelError, RemedyError
from ceg_remedy.formats import (
    CSV_HEADER,
    dataset_from_csv,
    dataset_to_csv,
    dumps,
    model_from_dict,
    model_to_dict,
    policies_from_raw,
    policies_to_raw,
    posterior_from_dict,
    posterior_to_dict,
    remedies_from_raw,
    remedy_from_dict,
    remedy_to_dict,
    structure_from_dict,
    structure_to_dict,
)
from ceg_remedy.inference import FitSettings, fit
from ceg_remedy.semi_markov import GenConfig, generate_dataset
from ceg_remedy.structure_learning import ahc_select


def test_model_round_trip(truth, truth_raw):
    model, _, _ = truth
    again = model_from_dict(json.loads(dumps(model_to_dict(model))))
    assert again == model


def test_model_defaults_fill_singletons(truth_raw):
    raw = {k: v for k, v in truth_raw.items() if k not in ("stages", "holding_clusters")}
    m = model_from_dict(raw)
    assert all(len(s) == 1 for s in m.stages)
    assert len(m.holding_clusters) == len(m.timed_edges)
    with pytest.raises(ModelError):
        model_from_dict({k: v for k, v in truth_raw.items() if k != "root_cause_edges"})


def test_remedy_round_trip(truth_raw):
    remedies = remedies_from_raw(truth_raw)
    for r in remedies.values():
        assert remedy_from_dict(json.loads(dumps(remedy_to_dict(r)))) == r
    lognormal = dict(truth_raw["remedies"][0], omega={"mean_log": 0.1, "sd_log": 0.4})
    r = remedy_from_dict(lognormal)
    assert r.omega.is_random and remedy_from_dict(remedy_to_dict(r)) == r
    with pytest.raises(RemedyError):
        remedy_from_dict({"id": "x"})


def test_policies_round_trip(truth, truth_raw):
    _, remedies, policies = truth
    assert policies_from_raw(policies_to_raw(policies), remedies) == policies
    with pytest.raises(ConfigInvalid):
        policies_from_raw([{"by_root_cause": {"e02": "nope"}}], remedies)


def test_dataset_round_trip(truth):
    model, _, policies = truth
    ds = generate_dataset(GenConfig(model, 60, 10, 6, policies, seed=2))
    text = dataset_to_csv(ds)
    assert text.splitlines()[0] == ",".join(CSV_HEADER)
    back = dataset_from_csv(text, model)
    assert back == ds
    assert dataset_to_csv(back) == text


def test_dataset_rejects_bad_rows(truth):
    model, _, _ = truth
    head = ",".join(CSV_HEADER) + "\n"
    with pytest.raises(DatasetError):
        dataset_from_csv("a,b\n1,2\n", model)
    with pytest.raises(DatasetError):
        dataset_from_csv(head + "0,0,0,0,zz,1.0,,,\n", model)
    with pytest.raises(DatasetError):
        dataset_from_csv(head + "0,0,0,0,e02,-1.0,,,\n", model)
    with pytest.raises(DatasetError):
        dataset_from_csv(head + "0,0,0,0,e02,1.0,,,\n", model)  # stops before a leaf
    with pytest.raises(DatasetError):
        dataset_from_csv(head + "0,0,0,0,e01,1.0,,,\n0,0,0,1,e24,1.0,,,\n", model)


def test_posterior_and_structure_round_trip(truth):
    model, remedies, policies = truth
    ds = generate_dataset(GenConfig(model, 50, 10, 4, policies, seed=3))
    post = fit(ds, model, "intervened", settings=FitSettings(60, 20), rng=np.random.default_rng(0),
               remedies=remedies)
    assert posterior_from_dict(json.loads(dumps(posterior_to_dict(post)))) == post
    sel = ahc_select(post, model)
    again = structure_from_dict(json.loads(dumps(structure_to_dict(sel))))
    assert again == sel and again.merges == sel.merges
    with pytest.raises(ConfigInvalid):
        posterior_from_dict({"mode": "idle"})


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(min_value=0, max_value=1e6, allow_nan=False), min_size=1, max_size=5))
def test_holding_times_survive_csv(truth, times):
    model, _, _ = truth
    head = ",".join(CSV_HEADER) + "\n"
    t = times[0]
    text = head + f"0,0,0,0,e01,{t!r},,,\n0,0,0,1,e1a,0.0,,,\n"
    ds = dataset_from_csv(text, model)
    assert ds.units[0].cycles[0].steps[0].holding_time == t
    assert dataset_to_csv(ds) == text
