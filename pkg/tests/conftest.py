import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from bevcomm.grid import ConfidenceMap, FeatureTensor, Frame, Vehicle, VehicleRole  # noqa: E402

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_CRITERIA: list[tuple[str, bool, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): one acceptance criterion, reported as PASS/FAIL")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        _CRITERIA.append((marker.args[0], rep.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label, ok, detail in _CRITERIA:
        line = f"{'PASS' if ok else 'FAIL'}  {label}"
        terminalreporter.write_line(f"{line}  ({detail})" if detail else line)


def make_frame(rng, n_vehicles=3, channels=4, height=6, width=8, frame_id=0, ids=None):
    """Random frame for unit tests; vehicle 0 (or the first id) is the ego."""
    ids = list(range(n_vehicles)) if ids is None else list(ids)
    vehicles = []
    for n, vid in enumerate(ids):
        role = VehicleRole.EGO if n == 0 else VehicleRole.REMOTE
        feats = FeatureTensor(rng.standard_normal((channels, height, width)))
        conf = ConfidenceMap(rng.normal(-2.0, 3.0, (channels, height, width)))
        vehicles.append(Vehicle(vid, role, feats, conf))
    return Frame(frame_id, tuple(vehicles))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
