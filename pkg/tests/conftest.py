import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from embodied_da.worldsim import FLOOR, IGNORE, WALL, SceneModel, ViewPose

settings.register_profile("ci", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


def box_scene(extents=(20, 20, 8), boxes=(), vs=0.1, n_classes=4, n_features=4, walls=True,
              floor=True, camera_height=0.3, robot_radius=0.2, start=None):
    """Hand-built scene. ``boxes`` are (i0, i1, j0, j1, k0, k1, class) index ranges."""
    nx, ny, nz = extents
    cls = np.full(extents, IGNORE, dtype=np.int16)
    if floor:
        cls[:, :, 0] = FLOOR
    if walls:
        cls[0, :, :] = WALL
        cls[-1, :, :] = WALL
        cls[:, 0, :] = WALL
        cls[:, -1, :] = WALL
    for i0, i1, j0, j1, k0, k1, c in boxes:
        cls[i0:i1, j0:j1, k0:k1] = c
    occupied = cls != IGNORE
    means = np.eye(n_classes, n_features) * 4.0
    feats = np.zeros(extents + (n_features,), dtype=np.float32)
    feats[occupied] = means[cls[occupied]]
    start = start or ViewPose(nx * vs / 2, ny * vs / 2, camera_height, 0.0)
    return SceneModel(voxel_size=vs, extents=tuple(extents), occupied=occupied, class_id=cls,
                      features=feats, means_source=means, means_target=means.copy(),
                      feature_std=0.0, shifted_classes=(), start_pose=start,
                      robot_radius=robot_radius, camera_height=camera_height)


@pytest.fixture
def room():
    # 2 m x 2 m walled room with one object in a corner
    return box_scene(boxes=[(3, 6, 3, 6, 1, 5, 2)])


def angle_close(a, b, tol=1e-12):
    return abs((a - b + math.pi) % (2 * math.pi) - math.pi) < tol


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_REPORT: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_REPORT:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_REPORT):
            terminalreporter.write_line(ACCEPTANCE_REPORT[k])
