import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from electricsight.geometry import CameraModel, RigidTransform
from electricsight.se3 import so3_exp

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_pose(rng, trans_scale=5.0):
    return RigidTransform(so3_exp(rng.normal(size=3)), rng.normal(scale=trans_scale, size=3))


@pytest.fixture
def camera():
    return CameraModel(1000.0, 1000.0, 960.0, 540.0, 1920, 1080)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def corridor_pose():
    """A camera on a 15 m mast looking down a corridor, slightly pitched."""
    return RigidTransform.from_camera_pose((0.0, -4.0, 15.0), (1.0, 0.05, -0.2))


def corridor_pairs(rng, camera, pose, n=50, noise=1.0):
    """Pixels and points spread over ~100 m in front of the camera."""
    Z = rng.uniform(15.0, 115.0, n)
    u = rng.uniform(50, camera.width - 50, n)
    v = rng.uniform(50, camera.height - 50, n)
    cam = (np.column_stack([u, v, np.ones(n)]) @ camera.K_inv.T) * Z[:, None]
    world = pose.inverse().apply(cam)
    pixels = np.column_stack([u, v]) + rng.normal(0.0, noise, (n, 2))
    return pixels, world


def pose_errors(est, true):
    """Camera-center error (m) and rotation error (deg)."""
    from electricsight.se3 import rotation_angle

    dt = np.linalg.norm(est.center - true.center)
    dr = np.degrees(rotation_angle(est.rotation @ true.rotation.T))
    return dt, dr


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.LINES:
            terminalreporter.write_line(line)
