import numpy as np
import pytest

from nerf_mir.scene_data import CameraIntrinsics, Dataset, Pose, View


def rot_y(deg):
    a = np.deg2rad(deg)
    m = np.eye(4)
    m[:3, :3] = [[np.cos(a), 0, np.sin(a)], [0, 1, 0], [-np.sin(a), 0, np.cos(a)]]
    return m


def random_pose(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    r = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    m = np.eye(4)
    m[:3, :3] = r
    m[:3, 3] = rng.normal(size=3)
    return Pose(m)


def make_dataset(n_views=3, h=40, w=40, seed=0, masks=None):
    rng = np.random.default_rng(seed)
    intr = CameraIntrinsics(50.0, 50.0, w / 2, h / 2, w, h)
    views = []
    for i in range(n_views):
        img = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
        views.append(View(img, Pose(rot_y(30 * i)), None if masks is None else masks[i]))
    return Dataset(intr, views, 2.0, 6.0)


@pytest.fixture
def small_dataset():
    return make_dataset()


# acceptance criteria report ---------------------------------------------------

ACCEPTANCE_RESULTS: list = []


def record_acceptance(name: str, ok: bool, detail: str = "") -> bool:
    line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  [{detail}]" if detail else "")
    ACCEPTANCE_RESULTS.append(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
