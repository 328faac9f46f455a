import numpy as np
import pytest

from embcam.backbone import BackboneConfig
from embcam.synthetic import fixture_head, generate_synthetic_dataset

FIXTURE_CHANNELS = 64


@pytest.fixture(scope="session")
def backbone():
    return BackboneConfig(seed=0, channels=FIXTURE_CHANNELS)


@pytest.fixture(scope="session")
def synth_head(backbone):
    return fixture_head(backbone, 2)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory, backbone):
    """2 classes x 2 images."""
    out = tmp_path_factory.mktemp("small")
    records = generate_synthetic_dataset(out, 2, 2, seed=3, backbone=backbone)
    return out, records


@pytest.fixture(scope="session")
def train_dataset(tmp_path_factory, backbone):
    """2 classes x 50 images."""
    out = tmp_path_factory.mktemp("train")
    records = generate_synthetic_dataset(out, 50, 2, seed=1, backbone=backbone)
    return out, records


@pytest.fixture(scope="session")
def test_dataset(tmp_path_factory, backbone):
    """Held-out 2 classes x 25 images, ids offset past the training set."""
    out = tmp_path_factory.mktemp("test")
    records = generate_synthetic_dataset(out, 25, 2, seed=2, backbone=backbone, id_offset=1000)
    return out, records


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


# -- acceptance reporting ----------------------------------------------------

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion this test checks")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (report.when != "call" and report.passed):
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "notes": []})
    if report.failed:
        entry["ok"] = False
    if report.when == "call":
        entry["notes"] += [f"{k}={v}" for k, v in item.user_properties]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        c = _CRITERIA[n]
        notes = f" [{', '.join(c['notes'])}]" if c["notes"] else ""
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if c['ok'] else 'FAIL'}: {c['title']}{notes}")
