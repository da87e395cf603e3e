import numpy as np
import pytest

from statavg.data import LabeledDataset

_acceptance = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): exit criterion")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.skipped):
        return
    label = dict(report.user_properties).get("acceptance")
    if label:
        _acceptance.append((label, report.outcome, report.duration))


@pytest.hookimpl(tryfirst=True)
def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("acceptance")
        if m:
            item.user_properties.append(("acceptance", f"criterion {m.args[0]}: {m.args[1]}"))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for label, outcome, duration in _acceptance:
        word = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[outcome]
        terminalreporter.write_line(f"[{word}] {label} ({duration:.1f}s)")


def make_dataset(x, y, class_names=None):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(y)
    if class_names is None:
        class_names = [f"c{k}" for k in range(int(y.max()) + 1 if y.size else 2)]
        if len(class_names) < 2:
            class_names = ["c0", "c1"]
    return LabeledDataset(x, y, [f"f{j}" for j in range(x.shape[1])], class_names)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
