import math

import numpy as np
import pytest

from lidarcal.geometry import RigidTransform

ACCEPTANCE_KEY = "acceptance"


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")
    config._acceptance_results = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        details = [v for k, v in item.user_properties if k == ACCEPTANCE_KEY]
        item.config._acceptance_results.append(
            (marker.args[0], marker.args[1], report.passed, details))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = sorted(config._acceptance_results, key=lambda r: r[0])
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, details in results:
        status = "PASS" if passed else "FAIL"
        line = f"criterion {number}: {status}  {title}"
        if details:
            line += "  [" + "; ".join(details) + "]"
        terminalreporter.write_line(line)


@pytest.fixture
def record(request):
    """Attach a measured value to the acceptance summary line of this test."""
    def _record(text: str):
        request.node.user_properties.append((ACCEPTANCE_KEY, text))
    return _record


def random_transform(rng, max_angle=math.pi, max_translation=5.0) -> RigidTransform:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0, max_angle)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    rot = np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * k @ k
    return RigidTransform(rot, rng.uniform(-max_translation, max_translation, 3))


def angle_between(a: RigidTransform, b: RigidTransform) -> float:
    rel = a.rotation.T @ b.rotation
    return math.degrees(math.acos(max(-1.0, min(1.0, (np.trace(rel) - 1) / 2))))


def box_surface(rng, n, size=(4.0, 3.0, 2.0), center=(0.0, 0.0, 0.0)):
    """Points uniformly spread over the faces of an axis-aligned box."""
    size = np.asarray(size)
    areas = np.array([size[1] * size[2], size[0] * size[2], size[0] * size[1]] * 2)
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = rng.uniform(-0.5, 0.5, size=(n, 3)) * size
    axis = face % 3
    sign = np.where(face < 3, 0.5, -0.5)
    pts[np.arange(n), axis] = sign * size[axis]
    return pts + np.asarray(center)
