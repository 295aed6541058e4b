"""Watermark evaluation: extraction, the attack matrix, sweeps and reports."""

from __future__ import annotations

import datetime as _dt
import json
import platform
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy

from . import __version__
from ._io import atomic_write_text, dumps_precise
from .attacks import (
    RESIZE_POLICY,
    SweepCurve,
    attack_image,
    attack_model,
    canonical_attacks,
    codec_identity,
    describe,
    is_model_attack,
    resize_bilinear,
    spec_dict,
    sweep,
)
from .decoder import FrozenDecoder, extract_bits
from .errors import ValidationError
from .metrics import bit_accuracy, psnr_capped, ssim
from .render import rasterize
from .scene import GaussianCloud, TrainingSet

TIMESTAMP_KEY = "timestamp"


@dataclass
class ViewMetrics:
    view: int
    bit_accuracy: float
    psnr: float
    psnr_capped: bool
    ssim: float


@dataclass
class AttackRow:
    name: str
    attack: dict | None
    bit_accuracy: float
    psnr: float
    psnr_capped: bool
    ssim: float
    per_view: list[ViewMetrics] = field(default_factory=list)


@dataclass
class EvalReport:
    """Metrics for the no-distortion row (top level) plus every attack row.

    PSNR/SSIM are measured between the decoded image (after any attack and
    the resize back to decoder resolution) and the pre-embedding render.
    """

    bit_accuracy: float
    psnr: float
    psnr_capped: bool
    ssim: float
    rows: list[AttackRow]
    config: dict
    codec: dict
    resize_policy: str = RESIZE_POLICY
    versions: dict = field(default_factory=dict)
    timestamp: str = ""

    def to_json(self) -> dict:
        return asdict(self)

    def row(self, name: str) -> AttackRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)


def software_versions() -> dict:
    return {"splatmark": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def extract_from_image(decoder: FrozenDecoder, image: np.ndarray) -> np.ndarray:
    """Bits from an arbitrary-size image, resized bilinearly to the decoder resolution."""
    image = np.asarray(image, dtype=np.float64)
    return extract_bits(decoder, resize_bilinear(image, decoder.image_shape))


def score_images(images: list[np.ndarray], originals: list[np.ndarray], decoder: FrozenDecoder) -> list[ViewMetrics]:
    out = []
    for k, (img, orig) in enumerate(zip(images, originals)):
        img = resize_bilinear(img, decoder.image_shape)
        acc = bit_accuracy(extract_bits(decoder, img), decoder.key)
        p, capped = psnr_capped(img, orig)
        out.append(ViewMetrics(k, acc, p, capped, ssim(img, orig)))
    return out


def attacked_images(cloud: GaussianCloud, training_set: TrainingSet, spec) -> list[np.ndarray]:
    cams = training_set.cameras
    if spec is None:
        return [rasterize(cloud, cam).image for cam in cams]
    if is_model_attack(spec):
        damaged = attack_model(cloud, spec)
        return [rasterize(damaged, cam).image for cam in cams]
    return [attack_image(rasterize(cloud, cam).image, spec) for cam in cams]


def evaluate_attack(name: str, spec, cloud: GaussianCloud, training_set: TrainingSet,
                    originals: list[np.ndarray], decoder: FrozenDecoder) -> AttackRow:
    views = score_images(attacked_images(cloud, training_set, spec), originals, decoder)
    p, capped = float(np.mean([v.psnr for v in views])), all(v.psnr_capped for v in views)
    return AttackRow(
        name=name,
        attack=spec_dict(spec),
        bit_accuracy=float(np.mean([v.bit_accuracy for v in views])),
        psnr=p,
        psnr_capped=capped,
        ssim=float(np.mean([v.ssim for v in views])),
        per_view=views,
    )


def evaluate(cloud: GaussianCloud, original: GaussianCloud, training_set: TrainingSet, decoder: FrozenDecoder,
             config: dict | None = None, attacks=None, attack_seed: int = 0) -> EvalReport:
    """Run the canonical attack matrix (or ``attacks``) and assemble a report in list order."""
    originals = [rasterize(original, cam).image for cam in training_set.cameras]
    if training_set.cameras[0].shape != decoder.image_shape:
        raise ValidationError(f"scene renders {training_set.cameras[0].shape} but the decoder expects "
                              f"{decoder.image_shape}")
    attacks = canonical_attacks(attack_seed) if attacks is None else list(attacks)
    rows = [evaluate_attack(n, s, cloud, training_set, originals, decoder) for n, s in attacks]
    base = rows[0] if rows and rows[0].attack is None else evaluate_attack(
        "none", None, cloud, training_set, originals, decoder)
    return EvalReport(
        bit_accuracy=base.bit_accuracy,
        psnr=base.psnr,
        psnr_capped=base.psnr_capped,
        ssim=base.ssim,
        rows=rows,
        config=dict(config or {}, decoder=decoder.to_json(), attack_seed=attack_seed),
        codec=codec_identity(),
        versions=software_versions(),
        timestamp=_dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    )


def report_json(report: EvalReport, include_timestamp: bool = True) -> str:
    doc = report.to_json()
    if not include_timestamp:
        doc.pop(TIMESTAMP_KEY)
    return dumps_precise(doc)


def save_report(report: EvalReport, path) -> None:
    atomic_write_text(path, report_json(report))


def comparable(path_or_text) -> dict:
    """Load a saved report with the timestamp removed, for reproducibility checks."""
    text = path_or_text
    if not str(text).lstrip().startswith("{"):
        with open(path_or_text) as fh:
            text = fh.read()
    doc = json.loads(text)
    doc.pop(TIMESTAMP_KEY, None)
    return doc


def sweep_scene(template, strengths, cloud: GaussianCloud, original: GaussianCloud,
                training_set: TrainingSet, decoder: FrozenDecoder) -> SweepCurve:
    """Strength curve of mean bit accuracy / PSNR over all views."""
    originals = [rasterize(original, cam).image for cam in training_set.cameras]

    def run(spec):
        row = evaluate_attack(describe(spec), spec, cloud, training_set, originals, decoder)
        return row.bit_accuracy, row.psnr

    return sweep(template, strengths, run)
