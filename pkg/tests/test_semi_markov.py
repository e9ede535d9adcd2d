import numpy as np
import pytest
from scipy import stats

from ceg_remedy.errors import ConfigInvalid, ModelError
from ceg_remedy.intervention import RemedyClass
from ceg_remedy.semi_markov import (
    GenConfig,
    Regime,
    RemedyPolicy,
    SemiMarkovModel,
    generate_dataset,
    sample_transition,
    simulate_unit,
    unit_generator,
)


def test_model_validation(truth):
    model, _, _ = truth
    with pytest.raises(ModelError):
        SemiMarkovModel(model.tree, model.root_causes, model.stages, (("e01", "e02"),))
    with pytest.raises(ModelError):
        SemiMarkovModel(model.tree, model.root_causes, model.stages,
                        model.holding_clusters + (("e1a",),))


def test_transition_frequencies_and_holding_law(truth):
    model, _, _ = truth
    rng = np.random.default_rng(0)
    n = 100_000
    edges, times = sample_transition(model, "v0", rng, size=n)
    for e in model.tree.out_edges["v0"]:
        freq = np.mean(edges == e.id)
        assert abs(freq - e.theta) < 4 * np.sqrt(e.theta * (1 - e.theta) / n)
    law = model.tree.edge["e02"].holding
    t = times[edges == "e02"]
    assert stats.kstest(t, "weibull_min", args=(law.shape, 0, law.scale)).pvalue > 0.001
    e, t0 = sample_transition(model, "v1", rng)
    assert e in ("e1a", "e1b") and t0 == 0.0


def test_regime_reweights_and_stretches(truth):
    model, _, _ = truth
    reg = Regime((1, 0), {v: 2.0 for v in model.tree.internal}, {v: 1.0 for v in model.tree.internal})
    w = np.array([0.4, 0.4 / 3, 0.2])
    assert reg.theta(model, "v0") == pytest.approx(w / w.sum())
    assert reg.theta(model, "v6") == pytest.approx([0.7, 0.3])
    assert reg.scale_factor(model, "e58") == 2.0
    assert reg.scale_factor(model, "e69") == 1.0
    zero = Regime((1, 1), {v: 0.0 for v in model.tree.internal}, {v: 0.0 for v in model.tree.internal})
    assert zero.theta(model, "v5") == pytest.approx([0.7, 0.3])


def test_unit_history_structure(truth):
    model, remedies, policies = truth
    unit = simulate_unit(model, policies[0], 30, unit_generator(3, 0))
    assert len(unit.cycles) == 30
    for k, c in enumerate(unit.cycles):
        assert model.tree.is_leaf(model.tree.edge[c.edges[-1]].head)
        if c.remedy is not None:
            assert c.failed
            assert unit.cycles[k + 1].start == c.remedy.reset_vertex
            assert c.remedy.remedy_class is RemedyClass.PERFECT
        elif k + 1 < len(unit.cycles):
            assert unit.cycles[k + 1].start == model.tree.root
    assert unit.cycles[-1].remedy is None


def test_imperfect_reset_follows_indicator(truth):
    model, _, policies = truth
    seen = set()
    for uid in range(300):
        unit = simulate_unit(model, policies[5], 6, unit_generator(1, uid))
        for c in unit.cycles:
            if c.remedy is not None:
                realized = model.realized_root(c.start, c.edges)
                fixed = c.remedy.indicator.covers(realized)
                assert (c.remedy.reset_vertex == "v0") == fixed
                seen.add(fixed)
    assert seen == {True, False}


def test_generation_is_seed_deterministic(truth):
    model, _, policies = truth
    cfg = GenConfig(model, 40, 4, 5, policies, seed=11)
    a, b = generate_dataset(cfg), generate_dataset(cfg)
    assert a == b
    assert generate_dataset(cfg, seed=12) != a
    assert [u.group_id for u in a.units][::10] == [0, 1, 2, 3]


def test_units_do_not_depend_on_dataset_size(truth):
    model, _, policies = truth
    small = generate_dataset(GenConfig(model, 10, 1, 3, policies[:1], seed=4))
    large = generate_dataset(GenConfig(model, 20, 1, 3, policies[:1], seed=4))
    assert small.units == large.units[:10]


def test_no_policies_means_no_remedies(truth):
    model, _, _ = truth
    ds = generate_dataset(GenConfig(model, 30, 3, 4, (), seed=1))
    assert not ds.has_remedies()


def test_gen_config_validation(truth):
    model, _, _ = truth
    with pytest.raises(ConfigInvalid):
        GenConfig(model, 5, 10)
    with pytest.raises(ConfigInvalid):
        GenConfig(model, 0)
    with pytest.raises(ConfigInvalid):
        simulate_unit(model, None, 0, unit_generator(0, 0))


def test_policy_choice(truth):
    _, remedies, _ = truth
    pol = RemedyPolicy({"e02": remedies["perfect_A"]}, remedies["uncertain_B"])
    assert pol.choose("e02", True).id == "perfect_A"
    assert pol.choose("e03", True).id == "uncertain_B"
    assert pol.choose("e02", False) is None
