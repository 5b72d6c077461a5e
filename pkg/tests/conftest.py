import numpy as np
import pytest

from roadpaste import dataset_io, synthetic

_ACCEPTANCE = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _ACCEPTANCE.append((marker.args[0], rep.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, outcome in _ACCEPTANCE:
        tag = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"[{tag}] {label}")


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    """The 10-image synthetic dataset (VOC + masks) shared across tests."""
    return synthetic.make_dataset(tmp_path_factory.mktemp("fixture") / "ds", n_images=10, seed=7)


@pytest.fixture(scope="session")
def fixture_index(fixture_dir):
    return dataset_io.load_dataset(fixture_dir)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
