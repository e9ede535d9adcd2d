import json
from pathlib import Path

import pytest

from ceg_remedy.experiment import default_model_path
from ceg_remedy.formats import model_from_dict, policies_from_raw, remedies_from_raw

_RESULTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_RESULTS] = []


@pytest.fixture
def acceptance_log(request):
    """Call with (criterion number, passed, detail); summarised after the run."""
    def log(number, passed, detail=""):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}".rstrip()
        print(line)
        request.config.stash[_RESULTS].append(line)
    return log


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_RESULTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def truth_raw():
    return json.loads(Path(default_model_path()).read_text())


@pytest.fixture(scope="session")
def truth(truth_raw):
    model = model_from_dict(truth_raw)
    remedies = remedies_from_raw(truth_raw["remedies"])
    policies = policies_from_raw(truth_raw["group_policies"], remedies)
    return model, remedies, policies
