import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from splatmark.errors import ValidationError
from splatmark.metrics import PSNR_CAP, psnr
from splatmark.render import rasterize
from splatmark.scene import (
    CameraView,
    GaussianCloud,
    TrainingSet,
    load_scene,
    random_quaternions,
    save_scene,
    synthesize_toy_scene,
)

from conftest import tiny_camera, tiny_cloud


def _random_cloud(seed, n):
    rng = np.random.default_rng(seed)
    return GaussianCloud(
        positions=rng.normal(0, 3, (n, 3)),
        rotations=random_quaternions(rng, n),
        log_scales=rng.normal(-2, 1, (n, 3)),
        opacity_logits=rng.normal(0, 4, n),
        colors=rng.uniform(0, 1, (n, 3)),
    )


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 12))
def test_save_load_round_trip_is_bit_exact(tmp_path_factory, seed, n):
    cloud = _random_cloud(seed, n)
    cam = tiny_camera()
    ts = TrainingSet(((cam, rasterize(cloud, cam).image),))
    path = tmp_path_factory.mktemp("rt") / "scene.json"
    save_scene(cloud, ts, path)
    cloud2, ts2 = load_scene(path)
    for name, value in cloud.params().items():
        assert np.array_equal(value, getattr(cloud2, name))
    c2 = ts2.cameras[0]
    assert np.array_equal(c2.rotation, cam.rotation) and np.array_equal(c2.translation, cam.translation)
    assert (c2.fx, c2.fy, c2.cx, c2.cy, c2.width, c2.height) == (cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height)
    # images pass through 16-bit PNG
    assert np.max(np.abs(ts2.images[0] - ts.images[0])) <= 0.5 / 65535 + 1e-12


def test_saved_numbers_have_17_significant_digits(tmp_path):
    cloud = tiny_cloud(0, 1).replace(opacity_logits=np.array([1 / 3]))
    cam = tiny_camera()
    save_scene(cloud, TrainingSet(((cam, rasterize(cloud, cam).image),)), tmp_path / "s.json")
    assert "0.33333333333333331" in (tmp_path / "s.json").read_text()


def _minimal_doc(tmp_path, rot=(1, 0, 0, 0)):
    cam = tiny_camera()
    img = np.zeros((16, 16, 3))
    from splatmark._io import write_png

    write_png(tmp_path / "v.png", img, bits=8)
    doc = {
        "gaussians": [{"mu": [0, 0, 0], "rot": list(rot), "log_scale": [-1, -1, -1], "opacity_logit": 0.5,
                       "rgb": [0.2, 0.4, 0.6]}],
        "views": [{"R": cam.rotation.reshape(-1).tolist(), "t": cam.translation.tolist(), "fx": cam.fx,
                   "fy": cam.fy, "cx": cam.cx, "cy": cam.cy, "width": 16, "height": 16, "image": "v.png"}],
    }
    path = tmp_path / "scene.json"
    path.write_text(json.dumps(doc))
    return path


def test_minimal_scene_loads(tmp_path):
    cloud, ts = load_scene(_minimal_doc(tmp_path))
    assert len(cloud) == 1 and len(ts) == 1
    assert np.all(ts.images[0] == 0)


def test_zero_quaternion_is_rejected(tmp_path):
    with pytest.raises(ValidationError, match="quaternion"):
        load_scene(_minimal_doc(tmp_path, rot=(0, 0, 0, 0)))


def test_missing_field_is_named(tmp_path):
    path = _minimal_doc(tmp_path)
    doc = json.loads(path.read_text())
    del doc["gaussians"][0]["log_scale"]
    path.write_text(json.dumps(doc))
    with pytest.raises(ValidationError, match="log_scale"):
        load_scene(path)


def test_empty_cloud_and_empty_views_rejected(tmp_path):
    with pytest.raises(ValidationError):
        GaussianCloud(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)))
    with pytest.raises(ValidationError):
        TrainingSet(())


def test_camera_invariants():
    with pytest.raises(ValidationError):
        CameraView(np.eye(3) * 1.1, np.zeros(3), 10, 10, 8, 8, 16, 16)
    with pytest.raises(ValidationError):
        CameraView(np.eye(3), np.zeros(3), 10, 10, 8, 8, 18, 16)
    with pytest.raises(ValidationError):
        CameraView(np.eye(3), np.zeros(3), 10, 10, 4, 4, 8, 8)


def test_image_must_match_camera():
    with pytest.raises(ValidationError):
        TrainingSet(((tiny_camera(16), np.zeros((32, 32, 3))),))


def test_toy_scene_is_deterministic_and_self_consistent():
    c1, t1 = synthesize_toy_scene(3, 40, 2, (32, 32))
    c2, t2 = synthesize_toy_scene(3, 40, 2, (32, 32))
    assert c1.equals(c2)
    assert all(np.array_equal(a, b) for a, b in zip(t1.images, t2.images))
    for cam, gt in t1:
        assert psnr(rasterize(c1, cam).image, gt) == PSNR_CAP


def test_toy_scene_seeds_differ():
    h = [hashlib.sha256(synthesize_toy_scene(s, 20, 1, (16, 16))[0].positions.tobytes()).hexdigest() for s in (1, 2)]
    assert h[0] != h[1]


@given(seed=st.integers(0, 10_000))
def test_toy_scene_satisfies_invariants(seed):
    cloud, ts = synthesize_toy_scene(seed, 12, 1, (16, 16))
    assert np.allclose(np.linalg.norm(cloud.rotations, axis=1), 1, atol=1e-6)
    assert np.all((cloud.opacities > 0) & (cloud.opacities < 1))
    assert np.all((cloud.colors >= 0) & (cloud.colors <= 1))
    assert ts.images[0].shape == (16, 16, 3)


def test_toy_scene_preconditions():
    with pytest.raises(ValidationError):
        synthesize_toy_scene(0, 0, 1)
    with pytest.raises(ValidationError):
        synthesize_toy_scene(0, 5, 0)


def test_cloud_arrays_are_read_only():
    cloud = tiny_cloud(0)
    with pytest.raises(ValueError):
        cloud.positions[0, 0] = 1.0
