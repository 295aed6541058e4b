"""Gaussian cloud, camera and training-set types with JSON scene persistence."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from ._io import atomic_write_text, dumps_precise, read_png, write_png
from .errors import ValidationError

QUAT_TOL = 1e-6
ORTHO_TOL = 1e-6


def _as_matrix(value, name: str, width: int) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 1 and width == 1:
        arr = arr.reshape(-1)
    elif arr.ndim != 2 or arr.shape[1] != width:
        raise ValidationError(f"{name}: expected shape (N, {width}), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name}: non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GaussianCloud:
    """Trainable splat parameters, stored unconstrained.

    Opacity is kept as a logit and scale as the log of the per-axis standard
    deviation so that optimizer steps never leave the valid domain. Rotations
    are unit quaternions in (w, x, y, z) order.
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "positions", _as_matrix(self.positions, "positions", 3))
        object.__setattr__(self, "rotations", _as_matrix(self.rotations, "rotations", 4))
        object.__setattr__(self, "log_scales", _as_matrix(self.log_scales, "log_scales", 3))
        object.__setattr__(self, "opacity_logits", _as_matrix(self.opacity_logits, "opacity_logits", 1))
        object.__setattr__(self, "colors", _as_matrix(self.colors, "colors", 3))
        n = len(self.positions)
        if n < 1:
            raise ValidationError("a Gaussian cloud needs at least one Gaussian")
        for name in ("rotations", "log_scales", "opacity_logits", "colors"):
            if len(getattr(self, name)) != n:
                raise ValidationError(f"{name}: length {len(getattr(self, name))} != {n}")
        norms = np.linalg.norm(self.rotations, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > QUAT_TOL)
        if bad.size:
            raise ValidationError(f"rotations: quaternion {bad[0]} has norm {norms[bad[0]]:.6g}, expected 1")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    def replace(self, **changes) -> "GaussianCloud":
        fields = {k: getattr(self, k) for k in PARAM_NAMES}
        fields.update(changes)
        return GaussianCloud(**fields)

    def subset(self, index) -> "GaussianCloud":
        index = np.asarray(index)
        return GaussianCloud(**{k: getattr(self, k)[index] for k in PARAM_NAMES})

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def equals(self, other: "GaussianCloud") -> bool:
        return len(self) == len(other) and all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in PARAM_NAMES
        )


PARAM_NAMES = ("positions", "rotations", "log_scales", "opacity_logits", "colors")


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValidationError("zero-norm quaternion")
    return q / n


@dataclass(frozen=True, eq=False)
class CameraView:
    """Pinhole camera; ``rotation`` maps world to camera coordinates.

    Pixel (x, y) has its center at image-plane coordinate (x, y), so a point on
    the optical axis lands exactly on the principal point.
    """

    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValidationError("camera: non-finite pose")
        err = np.abs(r @ r.T - np.eye(3)).max()
        if err > ORTHO_TOL:
            raise ValidationError(f"camera: rotation not orthonormal (max error {err:.3g})")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        for name in ("fx", "fy", "cx", "cy"):
            v = float(getattr(self, name))
            if not np.isfinite(v):
                raise ValidationError(f"camera: {name} is not finite")
            object.__setattr__(self, name, v)
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError("camera: focal lengths must be positive")
        for name in ("width", "height"):
            v = getattr(self, name)
            if int(v) != v:
                raise ValidationError(f"camera: {name} must be an integer")
            v = int(v)
            if v < 16 or v % 4:
                raise ValidationError(f"camera: {name}={v} must be >= 16 and divisible by 4")
            object.__setattr__(self, name, v)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.width, self.height

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None) -> "CameraView":
        """Camera at ``eye`` looking at ``target``; +z forward, +y down in the image."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        return cls(
            rotation=rot,
            translation=-rot @ eye,
            fx=fx,
            fy=fy,
            cx=width / 2 if cx is None else cx,
            cy=height / 2 if cy is None else cy,
            width=width,
            height=height,
        )


@dataclass(frozen=True, eq=False)
class TrainingSet:
    """Camera / ground-truth image pairs."""

    views: tuple = field(default_factory=tuple)

    def __post_init__(self):
        views = []
        for k, pair in enumerate(self.views):
            cam, img = pair
            img = np.array(img, dtype=np.float64)
            if img.shape != (cam.height, cam.width, 3):
                raise ValidationError(
                    f"view {k}: image shape {img.shape} does not match camera {(cam.height, cam.width, 3)}"
                )
            if not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 1:
                raise ValidationError(f"view {k}: image values must lie in [0, 1]")
            img.setflags(write=False)
            views.append((cam, img))
        if not views:
            raise ValidationError("a training set needs at least one view")
        object.__setattr__(self, "views", tuple(views))

    def __len__(self) -> int:
        return len(self.views)

    def __iter__(self) -> Iterator[tuple[CameraView, np.ndarray]]:
        return iter(self.views)

    @property
    def cameras(self) -> list[CameraView]:
        return [c for c, _ in self.views]

    @property
    def images(self) -> list[np.ndarray]:
        return [i for _, i in self.views]


# ---------------------------------------------------------------------------
# JSON scene files


def _require(obj: dict, key: str, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise ValidationError(f"{where}: missing field '{key}'")
    return obj[key]


def _numbers(value, n: int, where: str) -> list[float]:
    if not isinstance(value, list) or len(value) != n:
        raise ValidationError(f"{where}: expected an array of {n} numbers")
    for v in value:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ValidationError(f"{where}: expected numbers, got {type(v).__name__}")
    return [float(v) for v in value]


def _number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(f"{where}: expected a number")
    return float(value)


def cloud_from_json(items: Sequence[dict]) -> GaussianCloud:
    if not isinstance(items, list) or not items:
        raise ValidationError("gaussians: expected a non-empty array")
    cols = {k: [] for k in PARAM_NAMES}
    for i, g in enumerate(items):
        where = f"gaussians[{i}]"
        cols["positions"].append(_numbers(_require(g, "mu", where), 3, f"{where}.mu"))
        cols["rotations"].append(_numbers(_require(g, "rot", where), 4, f"{where}.rot"))
        cols["log_scales"].append(_numbers(_require(g, "log_scale", where), 3, f"{where}.log_scale"))
        cols["opacity_logits"].append(_number(_require(g, "opacity_logit", where), f"{where}.opacity_logit"))
        cols["colors"].append(_numbers(_require(g, "rgb", where), 3, f"{where}.rgb"))
    return GaussianCloud(**cols)


def cloud_to_json(cloud: GaussianCloud) -> list[dict]:
    return [
        {
            "mu": cloud.positions[i].tolist(),
            "rot": cloud.rotations[i].tolist(),
            "log_scale": cloud.log_scales[i].tolist(),
            "opacity_logit": float(cloud.opacity_logits[i]),
            "rgb": cloud.colors[i].tolist(),
        }
        for i in range(len(cloud))
    ]


def camera_from_json(v: dict, where: str) -> CameraView:
    width = _require(v, "width", where)
    height = _require(v, "height", where)
    if not isinstance(width, int) or not isinstance(height, int) or isinstance(width, bool):
        raise ValidationError(f"{where}: width/height must be integers")
    return CameraView(
        rotation=np.array(_numbers(_require(v, "R", where), 9, f"{where}.R")).reshape(3, 3),
        translation=_numbers(_require(v, "t", where), 3, f"{where}.t"),
        fx=_number(_require(v, "fx", where), f"{where}.fx"),
        fy=_number(_require(v, "fy", where), f"{where}.fy"),
        cx=_number(_require(v, "cx", where), f"{where}.cx"),
        cy=_number(_require(v, "cy", where), f"{where}.cy"),
        width=width,
        height=height,
    )


def camera_to_json(cam: CameraView) -> dict:
    return {
        "R": cam.rotation.reshape(-1).tolist(),
        "t": cam.translation.tolist(),
        "fx": cam.fx,
        "fy": cam.fy,
        "cx": cam.cx,
        "cy": cam.cy,
        "width": cam.width,
        "height": cam.height,
    }


def load_scene(path: str | os.PathLike) -> tuple[GaussianCloud, TrainingSet]:
    """Read a scene JSON file and the PNG images it references."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: top level must be an object")
    cloud = cloud_from_json(_require(doc, "gaussians", str(path)))
    views_doc = _require(doc, "views", str(path))
    if not isinstance(views_doc, list):
        raise ValidationError("views: expected an array")
    views = []
    for k, v in enumerate(views_doc):
        where = f"views[{k}]"
        cam = camera_from_json(v, where)
        image_ref = _require(v, "image", where)
        if not isinstance(image_ref, str):
            raise ValidationError(f"{where}.image: expected a path string")
        img_path = Path(image_ref)
        if not img_path.is_absolute():
            img_path = path.parent / img_path
        if not img_path.exists():
            raise ValidationError(f"{where}.image: file not found: {img_path}")
        views.append((cam, read_png(img_path)))
    return cloud, TrainingSet(tuple(views))


def save_scene(cloud: GaussianCloud, training_set: TrainingSet, path: str | os.PathLike) -> None:
    """Write ``path`` plus one 16-bit PNG per view in a sibling ``<stem>_images`` directory."""
    if not isinstance(cloud, GaussianCloud) or len(cloud) < 1:
        raise ValidationError("save_scene: invalid cloud")
    if not isinstance(training_set, TrainingSet) or len(training_set) < 1:
        raise ValidationError("save_scene: training set has no views")
    path = Path(path)
    img_dir = path.parent / f"{path.stem}_images"
    views = []
    for k, (cam, img) in enumerate(training_set):
        rel = f"{img_dir.name}/view_{k:03d}.png"
        write_png(path.parent / rel, img, bits=16)
        views.append({**camera_to_json(cam), "image": rel})
    atomic_write_text(path, dumps_precise({"gaussians": cloud_to_json(cloud), "views": views}))


# ---------------------------------------------------------------------------
# Synthetic scenes


def random_quaternions(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q[q[:, 0] < 0] *= -1
    return q


def ring_cameras(n_views: int, resolution: tuple[int, int], radius: float = 4.0, focal_scale: float = 1.1,
                 elevation_deg: float = 15.0) -> list[CameraView]:
    width, height = resolution
    f = focal_scale * width
    cams = []
    for k in range(n_views):
        az = 2 * np.pi * k / n_views
        el = np.deg2rad(elevation_deg) * (1 if k % 2 == 0 else -1)
        eye = radius * np.array([np.cos(el) * np.cos(az), np.sin(el), np.cos(el) * np.sin(az)])
        cams.append(CameraView.look_at(eye, np.zeros(3), np.array([0.0, 1.0, 0.0]), f, f, width, height))
    return cams


def synthesize_toy_scene(seed: int, n_gaussians: int = 300, n_views: int = 8,
                         resolution: tuple[int, int] = (64, 64),
                         residue_fraction: float = 0.25) -> tuple[GaussianCloud, TrainingSet]:
    """Random splat blob viewed from a ring of cameras.

    Ground truth is the cloud's own render, so the cloud is an exact
    "pre-trained" model of its training set. A ``residue_fraction`` of the
    Gaussians are tiny and almost transparent, standing in for the redundant
    primitives a real optimized model accumulates.
    """
    if n_gaussians < 1 or n_views < 1:
        raise ValidationError("synthesize_toy_scene: need n_gaussians >= 1 and n_views >= 1")
    from .render import rasterize

    rng = np.random.default_rng(seed)
    n_res = int(np.floor(residue_fraction * n_gaussians)) if n_gaussians > 1 else 0
    n_core = n_gaussians - n_res

    direction = rng.standard_normal((n_gaussians, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = rng.uniform(0.0, 1.0, n_gaussians) ** (1 / 3)
    positions = direction * radius[:, None]

    log_scales = np.log(rng.uniform(0.06, 0.22, (n_gaussians, 3)))
    opacity = rng.uniform(0.4, 3.0, n_gaussians)
    # smooth color field plus per-splat jitter
    base = 0.5 + 0.35 * np.stack(
        [np.sin(2.1 * positions[:, 0] + 0.3), np.sin(1.7 * positions[:, 1] + 1.1), np.cos(1.9 * positions[:, 2])],
        axis=1,
    )
    colors = np.clip(base + rng.normal(0.0, 0.12, (n_gaussians, 3)), 0.02, 0.98)

    # residue: near-transparent specks
    res = slice(n_core, n_gaussians)
    log_scales[res] = np.log(rng.uniform(0.005, 0.02, (n_res, 3)))
    opacity[res] = rng.uniform(-16.0, -13.0, n_res)

    cloud = GaussianCloud(
        positions=positions,
        rotations=random_quaternions(rng, n_gaussians),
        log_scales=log_scales,
        opacity_logits=opacity,
        colors=colors,
    )
    cams = ring_cameras(n_views, resolution)
    views = tuple((cam, rasterize(cloud, cam).image) for cam in cams)
    return cloud, TrainingSet(views)
