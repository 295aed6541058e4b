"""Image-space and model-space distortions for robustness evaluation.

Every attack is a small frozen dataclass carrying its own rng seed, so
replaying a spec reproduces the output bit-exactly.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Sequence, Union

import cv2
import numpy as np
import PIL
from PIL import Image, features
from scipy import ndimage

from .errors import ValidationError
from .scene import GaussianCloud, normalize_quaternions

RESIZE_POLICY = "bilinear resize back to the decoder resolution"


def _check_fraction(value: float, name: str) -> None:
    if not 0.0 < value <= 1.0:
        raise ValidationError(f"{name} must lie in (0, 1], got {value}")


def _check_nonneg(value: float, name: str) -> None:
    if not (value >= 0.0 and math.isfinite(value)):
        raise ValidationError(f"{name} must be a finite value >= 0, got {value}")


# ---------------------------------------------------------------------------
# Specs


@dataclass(frozen=True)
class GaussianNoise:
    sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        _check_nonneg(self.sigma, "sigma")


@dataclass(frozen=True)
class Rotation:
    """Rotate about the image center; ``angle_rad=None`` picks +-pi/6 from the seed."""

    angle_rad: float | None = None
    seed: int = 0


@dataclass(frozen=True)
class Scaling:
    factor: float = 0.75
    seed: int = 0

    def __post_init__(self):
        if not (self.factor > 0 and math.isfinite(self.factor)):
            raise ValidationError(f"scaling factor must be positive, got {self.factor}")


@dataclass(frozen=True)
class GaussianBlur:
    sigma: float = 0.1
    kernel: int | None = None
    seed: int = 0

    def __post_init__(self):
        _check_nonneg(self.sigma, "sigma")
        if self.kernel is not None and (self.kernel < 1 or self.kernel % 2 == 0):
            raise ValidationError("blur kernel size must be a positive odd integer")

    @property
    def kernel_size(self) -> int:
        if self.kernel is not None:
            return self.kernel
        return max(3, 2 * math.ceil(3 * self.sigma) + 1)


@dataclass(frozen=True)
class Crop:
    keep_area_fraction: float = 0.4
    seed: int = 0

    def __post_init__(self):
        _check_fraction(self.keep_area_fraction, "keep_area_fraction")


@dataclass(frozen=True)
class JpegCompress:
    quality: int = 50
    seed: int = 0

    def __post_init__(self):
        if int(self.quality) != self.quality or not 1 <= self.quality <= 100:
            raise ValidationError(f"JPEG quality must be an integer in [1, 100], got {self.quality}")


@dataclass(frozen=True)
class Combined:
    attacks: tuple = ()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "attacks", tuple(self.attacks))
        if not self.attacks:
            raise ValidationError("Combined needs at least one member attack")
        for a in self.attacks:
            if not isinstance(a, IMAGE_ATTACKS):
                raise ValidationError(f"Combined members must be image attacks, got {type(a).__name__}")


@dataclass(frozen=True)
class ModelNoise:
    sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        _check_nonneg(self.sigma, "sigma")


@dataclass(frozen=True)
class ModelRemove:
    fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        _check_fraction(self.fraction, "fraction")


@dataclass(frozen=True)
class ModelClone:
    fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        _check_fraction(self.fraction, "fraction")


IMAGE_ATTACKS = (GaussianNoise, Rotation, Scaling, GaussianBlur, Crop, JpegCompress, Combined)
MODEL_ATTACKS = (ModelNoise, ModelRemove, ModelClone)
AttackSpec = Union[GaussianNoise, Rotation, Scaling, GaussianBlur, Crop, JpegCompress, Combined,
                   ModelNoise, ModelRemove, ModelClone]
_BY_NAME = {cls.__name__: cls for cls in IMAGE_ATTACKS + MODEL_ATTACKS}


def is_model_attack(spec) -> bool:
    return isinstance(spec, MODEL_ATTACKS)


def spec_to_json(spec) -> dict:
    doc = {"type": type(spec).__name__}
    for f in fields(spec):
        value = getattr(spec, f.name)
        doc[f.name] = [spec_to_json(a) for a in value] if f.name == "attacks" else value
    return doc


def spec_from_json(doc: dict):
    if not isinstance(doc, dict) or "type" not in doc:
        raise ValidationError("attack spec must be an object with a 'type' field")
    cls = _BY_NAME.get(doc["type"])
    if cls is None:
        raise ValidationError(f"unknown attack type {doc['type']!r}; expected one of {sorted(_BY_NAME)}")
    known = {f.name for f in fields(cls)}
    extra = set(doc) - known - {"type"}
    if extra:
        raise ValidationError(f"{doc['type']}: unknown field(s) {sorted(extra)}")
    kwargs = {k: v for k, v in doc.items() if k != "type"}
    if "attacks" in kwargs:
        kwargs["attacks"] = tuple(spec_from_json(a) for a in kwargs["attacks"])
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ValidationError(f"{doc['type']}: {exc}") from exc


def describe(spec) -> str:
    if spec is None:
        return "none"
    if isinstance(spec, Combined):
        return "Combined(" + "+".join(describe(a) for a in spec.attacks) + ")"
    args = ",".join(f"{f.name}={getattr(spec, f.name)}" for f in fields(spec) if f.name != "seed")
    return f"{type(spec).__name__}({args})"


def codec_identity() -> dict:
    return {"pillow": PIL.__version__, "libjpeg": features.version("jpg") or "unknown",
            "opencv": cv2.__version__}


# ---------------------------------------------------------------------------
# Image attacks


def _as_image(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValidationError(f"expected an H x W x 3 image, got shape {img.shape}")
    return img


def resize_bilinear(image: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resize to ``shape`` = (H, W)."""
    h, w = shape
    if image.shape[:2] == (h, w):
        return np.array(image, dtype=np.float64)
    return cv2.resize(np.ascontiguousarray(image, dtype=np.float64), (w, h), interpolation=cv2.INTER_LINEAR)


def rotation_angle(spec: Rotation) -> float:
    if spec.angle_rad is not None:
        return float(spec.angle_rad)
    sign = np.random.default_rng(spec.seed).choice([-1.0, 1.0])
    return float(sign * math.pi / 6)


def crop_window(shape: tuple[int, int], fraction: float) -> tuple[slice, slice]:
    h, w = shape
    ch = max(1, int(round(h * math.sqrt(fraction))))
    cw = max(1, int(round(w * math.sqrt(fraction))))
    y0, x0 = (h - ch) // 2, (w - cw) // 2
    return slice(y0, y0 + ch), slice(x0, x0 + cw)


def jpeg_roundtrip(image: np.ndarray, quality: int) -> np.ndarray:
    u8 = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8, "RGB").save(buf, format="JPEG", quality=int(quality), optimize=False, progressive=False)
    buf.seek(0)
    return np.asarray(Image.open(buf).convert("RGB"), dtype=np.float64) / 255.0


def attack_image(image: np.ndarray, spec) -> np.ndarray:
    img = _as_image(image)
    if isinstance(spec, GaussianNoise):
        if spec.sigma == 0:
            return img.copy()
        noise = np.random.default_rng(spec.seed).normal(0.0, spec.sigma, img.shape)
        return np.clip(img + noise, 0.0, 1.0)
    if isinstance(spec, Rotation):
        deg = math.degrees(rotation_angle(spec))
        out = ndimage.rotate(img, deg, axes=(1, 0), reshape=False, order=1, mode="constant", cval=0.0)
        return np.clip(out, 0.0, 1.0)
    if isinstance(spec, Scaling):
        h, w = img.shape[:2]
        shape = (max(1, int(round(h * spec.factor))), max(1, int(round(w * spec.factor))))
        return np.clip(resize_bilinear(img, shape), 0.0, 1.0)
    if isinstance(spec, GaussianBlur):
        if spec.sigma == 0:
            return img.copy()
        k = spec.kernel_size
        out = cv2.GaussianBlur(img, (k, k), sigmaX=spec.sigma, sigmaY=spec.sigma,
                               borderType=cv2.BORDER_REPLICATE)
        return np.clip(out, 0.0, 1.0)
    if isinstance(spec, Crop):
        ys, xs = crop_window(img.shape[:2], spec.keep_area_fraction)
        return img[ys, xs].copy()
    if isinstance(spec, JpegCompress):
        return jpeg_roundtrip(img, spec.quality)
    if isinstance(spec, Combined):
        for member in spec.attacks:
            img = attack_image(img, member)
        return img
    raise ValidationError(f"{type(spec).__name__} is not an image attack")


# ---------------------------------------------------------------------------
# Model attacks


def attack_model(cloud: GaussianCloud, spec) -> GaussianCloud:
    n = len(cloud)
    if isinstance(spec, ModelNoise):
        if spec.sigma == 0:
            return cloud
        rng = np.random.default_rng(spec.seed)
        noisy = {name: value + rng.normal(0.0, spec.sigma, value.shape) for name, value in cloud.params().items()}
        noisy["rotations"] = normalize_quaternions(noisy["rotations"])
        return GaussianCloud(**noisy)
    if isinstance(spec, ModelRemove):
        k = math.floor(spec.fraction * n)
        if k >= n:
            raise ValidationError(f"removing {k} of {n} Gaussians would leave an empty cloud")
        drop = np.random.default_rng(spec.seed).choice(n, size=k, replace=False)
        keep = np.setdiff1d(np.arange(n), drop)
        return cloud.subset(keep)
    if isinstance(spec, ModelClone):
        k = math.floor(spec.fraction * n)
        picks = np.random.default_rng(spec.seed).choice(n, size=k, replace=False)
        return cloud.subset(np.concatenate([np.arange(n), picks]))
    raise ValidationError(f"{type(spec).__name__} is not a model attack")


# ---------------------------------------------------------------------------
# Canonical evaluation list and sweeps


def canonical_attacks(seed: int = 0) -> list[tuple[str, object]]:
    """Evaluation rows in report order: no distortion, 8 image attacks, 3 model attacks."""
    return [
        ("none", None),
        ("gaussian_noise", GaussianNoise(0.1, seed)),
        ("rotation", Rotation(None, seed)),
        ("scaling", Scaling(0.75, seed)),
        ("gaussian_blur", GaussianBlur(0.1, None, seed)),
        ("crop", Crop(0.4, seed)),
        ("jpeg", JpegCompress(50, seed)),
        ("combined_noise_crop_jpeg", Combined((GaussianNoise(0.1, seed), Crop(0.4, seed), JpegCompress(50, seed)), seed)),
        ("combined_crop_blur_jpeg", Combined((Crop(0.4, seed), GaussianBlur(0.1, None, seed), JpegCompress(50, seed)), seed)),
        ("model_noise", ModelNoise(0.1, seed)),
        ("model_remove", ModelRemove(0.2, seed)),
        ("model_clone", ModelClone(0.2, seed)),
    ]


STRENGTH_FIELDS = {
    GaussianNoise: "sigma",
    Rotation: "angle_rad",
    Scaling: "factor",
    GaussianBlur: "sigma",
    Crop: "keep_area_fraction",
    JpegCompress: "quality",
    ModelNoise: "sigma",
    ModelRemove: "fraction",
    ModelClone: "fraction",
}


def with_strength(template, strength):
    name = STRENGTH_FIELDS.get(type(template))
    if name is None:
        raise ValidationError(f"{type(template).__name__} has no sweepable strength")
    if isinstance(template, JpegCompress):
        strength = int(strength)
    return replace(template, **{name: strength})


@dataclass
class SweepPoint:
    strength: float
    bit_accuracy: float
    psnr: float


@dataclass
class SweepCurve:
    attack: str
    points: list[SweepPoint] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["strength", "bit_accuracy", "psnr"])
        for p in self.points:
            writer.writerow([repr(float(p.strength)), repr(float(p.bit_accuracy)), repr(float(p.psnr))])
        return buf.getvalue()


def sweep(template, strengths: Sequence[float],
          evaluate: Callable[[object], tuple[float, float]]) -> SweepCurve:
    """Evaluate ``evaluate(spec)`` -> (bit_accuracy, psnr) at each strength."""
    s = [float(v) for v in strengths]
    if not s:
        raise ValidationError("sweep needs at least one strength")
    d = np.diff(s)
    if not (np.all(d >= 0) or np.all(d <= 0)):
        raise ValidationError("sweep strengths must be monotone")
    curve = SweepCurve(type(template).__name__)
    for value in strengths:
        acc, p = evaluate(with_strength(template, value))
        curve.points.append(SweepPoint(float(value), float(acc), float(p)))
    return curve


def spec_dict(spec) -> dict | None:
    return None if spec is None else spec_to_json(spec)

