import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from scpainter.geometry import CameraIntrinsics, Frame, RigidPose  # noqa: E402
from scpainter.splat import Gaussian3D  # noqa: E402
from scpainter.synth import canonical_scene  # noqa: E402

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def scene():
    return canonical_scene(0)


def random_rotation(rng):
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_frame(rng, W=32, H=24, pose=None, hole_fraction=0.2):
    K = CameraIntrinsics(rng.uniform(20, 40), rng.uniform(20, 40), W / 2 + rng.uniform(-2, 2),
                         H / 2 + rng.uniform(-2, 2), W, H)
    if pose is None:
        pose = RigidPose(random_rotation(rng), rng.uniform(-3, 3, 3))
    depth = rng.uniform(1.0, 10.0, (H, W))
    depth[rng.random((H, W)) < hole_fraction] = np.inf
    return Frame(rng.random((H, W, 3)), depth, K, pose)


def random_gaussians(rng, n, degree=0, depth_range=(2.0, 6.0), spread=0.8):
    gs = []
    for _ in range(n):
        q = rng.standard_normal(4)
        gs.append(
            Gaussian3D(
                np.array([rng.uniform(-spread, spread), rng.uniform(-spread, spread), rng.uniform(*depth_range)]),
                rng.uniform(0.05, 0.5, 3),
                q / np.linalg.norm(q),
                rng.uniform(0.2, 1.0),
                rng.uniform(-1.0, 1.0, ((degree + 1) ** 2, 3)),
            )
        )
    return gs
