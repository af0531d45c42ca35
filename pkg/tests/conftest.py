import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from flowrecon.scenecore import CameraView, GaussianScene, intrinsics_matrix, look_at  # noqa: E402

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_scene(rng, n, degree=0, spread=1.5, dtype=np.float64, scale_range=(-3.0, -1.5)):
    k = (degree + 1) ** 2
    sh = rng.normal(size=(n, k, 3)) * 0.3
    sh[:, 0] = rng.uniform(0, 1 / 0.2821, (n, 3))
    return GaussianScene(
        positions=rng.uniform(-spread, spread, (n, 3)),
        log_scales=rng.uniform(*scale_range, (n, 3)),
        quats=rng.normal(size=(n, 4)),
        opacity_logits=rng.normal(size=n),
        sh=sh,
        sh_degree=degree,
        dtype=dtype,
    )


def random_camera(rng, size=32, dist=3.5, focal=40.0):
    c = rng.normal(size=3)
    c = c / np.linalg.norm(c) * dist
    return CameraView(look_at(c, [0, 0, 0]), c, intrinsics_matrix(focal, focal, (size - 1) / 2, (size - 1) / 2), size,
                      size)


def front_camera(size=32, dist=3.0, focal=40.0):
    c = np.array([0.0, 0.0, -dist])
    return CameraView(np.eye(3), c, intrinsics_matrix(focal, focal, (size - 1) / 2, (size - 1) / 2), size, size)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptlog import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
