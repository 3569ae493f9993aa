import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dcne import pipeline as pl
from dcne import synth
from dcne.tensornet import read_network

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class Suite:
    """A synthetic dataset on disk plus cached per-class attributions."""

    def __init__(self, root, images_per_class, seed=0):
        self.spec = synth.default_spec(seed, images_per_class)
        self.manifest_path = synth.write_dataset(self.spec, root)
        self.manifest = pl.load_manifest(self.manifest_path)
        self.net = read_network(self.manifest.network)
        self._cache = {}

    def attributions(self, class_id):
        if class_id not in self._cache:
            entry = self.manifest.get(class_id)
            self._cache[class_id] = pl.attribute_class(self.net, entry)
        return self._cache[class_id]

    def all_attributions(self):
        return {c.class_id: self.attributions(c.class_id) for c in self.manifest.classes}


@pytest.fixture(scope="session")
def suite(tmp_path_factory):
    """Full acceptance suite: 2 classes x 20 images x 2 planted features."""
    return Suite(tmp_path_factory.mktemp("suite"), 20)


@pytest.fixture(scope="session")
def small_suite(tmp_path_factory):
    return Suite(tmp_path_factory.mktemp("small"), 4)


# ------------------------------------------------------ acceptance summary

_criteria = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, name): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    detail = dict(report.user_properties).get("detail", "")
    _criteria.append((marker.args[0], marker.args[1], report.outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, outcome, detail in sorted(_criteria):
        status = "PASS" if outcome == "passed" else "FAIL"
        line = f"criterion {number} [{status}] {name}"
        terminalreporter.write_line(f"{line}: {detail}" if detail else line)
