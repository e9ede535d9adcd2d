import json

import numpy as np
import pytest

from ceg_remedy.cli import main
from ceg_remedy.experiment import default_model_path
from ceg_remedy.formats import read_json
from ceg_remedy.intervention import intervened_root_distribution


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def remedy_free(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "clean.csv"
    assert run("simulate", "--units", 60, "--cycles", 3, "--no-remedies", "--seed", 1, "--out", path) == 0
    return path


@pytest.fixture(scope="module")
def remedied(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "remedied.csv"
    assert run("simulate", "--units", 60, "--cycles", 3, "--seed", 2, "--out", path) == 0
    return path


def test_simulate_is_deterministic(tmp_path, remedy_free):
    again = tmp_path / "again.csv"
    assert run("simulate", "--units", 60, "--cycles", 3, "--no-remedies", "--seed", 1, "--out", again) == 0
    assert again.read_bytes() == remedy_free.read_bytes()


def test_fit_modes_agree_on_remedy_free_data(tmp_path, remedy_free):
    outs = {}
    for mode in ("idle", "intervened"):
        out = tmp_path / f"{mode}.json"
        assert run("fit", "--data", remedy_free, "--mode", mode, "--iters", 60, "--burnin", 20,
                   "--seed", 3, "--out", out) == 0
        outs[mode] = read_json(out)
    a, b = outs["idle"], outs["intervened"]
    for x, y in zip(a["stages"], b["stages"]):
        np.testing.assert_allclose(x["mean"], y["mean"], rtol=0, atol=1e-12)
    for x, y in zip(a["clusters"], b["clusters"]):
        np.testing.assert_allclose(x["shape_samples"], y["shape_samples"], rtol=0, atol=1e-12)


def test_fit_to_stdout_and_select(tmp_path, remedied, capsys):
    assert run("fit", "--data", remedied, "--iters", 40, "--burnin", 10) == 0
    post = json.loads(capsys.readouterr().out)
    assert post["mode"] == "intervened"
    assert post["indicator_frequencies"]["perfect_A"] == {"10": 1.0}

    out = tmp_path / "sel.json"
    assert run("select", "--data", remedied, "--iters", 40, "--burnin", 10, "--out", out) == 0
    sel = read_json(out)
    assert {"stages", "clusters", "score"} <= set(sel)
    assert run("select", "--data", remedied, "--raw-counts", "--out", out) == 0


def test_intervene_perfect_gives_point_mass(capsys):
    assert run("intervene", "--remedy-id", "perfect_A") == 0
    out = json.loads(capsys.readouterr().out)
    rem = out["remedies"]["perfect_A"]
    assert rem["indicator_distribution"] == {"10": 1.0}
    assert sum(rem["root_distribution"].values()) == pytest.approx(1.0, abs=1e-12)
    assert 0.0 <= rem["failure_probability"] <= 1.0


def test_intervene_with_posterior_prior(tmp_path, remedied, truth, capsys):
    model, remedies, _ = truth
    post = tmp_path / "post.json"
    assert run("fit", "--data", remedied, "--iters", 40, "--burnin", 10, "--out", post) == 0
    assert run("intervene", "--prior", post) == 0
    out = json.loads(capsys.readouterr().out)
    assert set(out["remedies"]) == set(remedies)
    # with no prior the root distribution is the module-level computation
    assert run("intervene", "--remedy-id", "uncertain_A") == 0
    plain = json.loads(capsys.readouterr().out)["remedies"]["uncertain_A"]["root_distribution"]
    want = intervened_root_distribution(model, remedies["uncertain_A"])
    assert list(plain.values()) == pytest.approx(list(want), abs=1e-12)


def test_experiment_command(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"sizes": [20], "n_groups": 2, "cycles_per_unit": 2, "replicates": 2,
                               "iters": 20, "burnin": 5, "seed": 1}))
    assert run("experiment", "--config", cfg, "--out", tmp_path / "out") == 0
    for name in ("report.json", "merge_proportions.csv", "errors.csv", "timing.json"):
        assert (tmp_path / "out" / name).exists()


def error_of(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_errors_are_json_with_exit_codes(tmp_path, capsys):
    assert run("intervene", "--remedy-id", "nope") == 2
    assert error_of(capsys)["error"] == "config_invalid"

    assert run("fit", "--data", tmp_path / "missing.csv") == 2
    assert "error" in error_of(capsys)

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"sizes": [5, 1]}))
    assert run("experiment", "--config", bad, "--out", tmp_path / "o") == 2
    assert error_of(capsys)["error"] == "config_invalid"

    model = read_json(default_model_path())
    model["edges"][0]["theta"] = 0.123
    broken = tmp_path / "model.json"
    broken.write_text(json.dumps(model))
    assert run("intervene", "--model", broken) == 2
    assert "error" in error_of(capsys)


def test_missing_required_argument_exits():
    with pytest.raises(SystemExit) as exc:
        run("simulate")
    assert exc.value.code == 2
