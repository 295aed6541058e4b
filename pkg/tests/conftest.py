import numpy as np
import pytest
from hypothesis import settings

from splatmark.scene import CameraView, GaussianCloud, TrainingSet, random_quaternions
from splatmark.render import rasterize

settings.register_profile("default", max_examples=25, deadline=None)
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def tiny_camera(res: int = 16, focal: float = 1.4) -> CameraView:
    return CameraView.look_at(np.array([0.0, 0.0, -3.0]), np.zeros(3), np.array([0.0, 1.0, 0.0]),
                              focal * res, focal * res, res, res)


def tiny_cloud(seed: int, n: int = 4) -> GaussianCloud:
    """A few overlapping, semi-transparent Gaussians in front of ``tiny_camera``.

    Opacities stay well below the alpha clamp and colors inside (0, 1), so the
    render is smooth in every parameter.
    """
    rng = np.random.default_rng(seed)
    return GaussianCloud(
        positions=rng.uniform(-0.35, 0.35, (n, 3)),
        rotations=random_quaternions(rng, n),
        log_scales=np.log(rng.uniform(0.18, 0.4, (n, 3))),
        opacity_logits=rng.uniform(-1.0, 0.8, n),
        colors=rng.uniform(0.15, 0.85, (n, 3)),
    )


def tiny_scene(seed: int, n: int = 4, res: int = 16) -> tuple[GaussianCloud, TrainingSet]:
    cloud = tiny_cloud(seed, n)
    cam = tiny_camera(res)
    return cloud, TrainingSet(((cam, rasterize(cloud, cam).image),))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
