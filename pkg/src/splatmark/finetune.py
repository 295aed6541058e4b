"""Watermark embedding by fine-tuning splat parameters against a frozen decoder."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol

import numpy as np

from .decoder import (
    FrozenDecoder,
    WatermarkKey,
    build_decoder,
    decode,
    decode_backward,
    decoder_input,
    extract_bits,
)
from .errors import NumericError, ValidationError
from .freq import DETAIL_SUBBANDS, WaveletPyramid, dwt2, idwt2
from .metrics import bit_accuracy, psnr
from .render import CloudGradients, rasterize, rasterize_backward
from .scene import GaussianCloud, TrainingSet

log = logging.getLogger(__name__)

MASKED_GROUPS = ("colors", "opacity_logits", "rotations", "log_scales")
WAVELET_LEVELS = 2


@dataclass(frozen=True)
class LossWeights:
    lambda_rec: float = 1.0
    lambda_lpips: float = 0.0
    lambda_w: float = 0.3
    lambda_m: float = 0.4

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v >= 0:
                raise ValidationError(f"{k} must be >= 0")


@dataclass(frozen=True)
class LearningRates:
    positions: float = 1.6e-5
    colors: float = 2.5e-3
    opacity_logits: float = 2.5e-2
    log_scales: float = 1e-3
    rotations: float = 1e-3

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v > 0:
                raise ValidationError(f"learning rate {k} must be > 0")


@dataclass(frozen=True)
class FinetuneConfig:
    key: WatermarkKey = field(default_factory=lambda: WatermarkKey(0, 32))
    epochs: int = 10
    lr: LearningRates = field(default_factory=LearningRates)
    weights: LossWeights = field(default_factory=LossWeights)
    beta: float = 4.0
    seed: int = 0
    use_mask: bool = True
    decoder_domain: str = "ll2"
    grid: int = 16
    reject: int = 4
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-15

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if not self.beta > 0:
            raise ValidationError("beta must be > 0")

    def to_json(self) -> dict:
        d = asdict(self)
        d["key"] = {"seed": int(self.key.seed), "n_bits": self.key.n_bits}
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_json(cls, doc: dict) -> "FinetuneConfig":
        doc = dict(doc)
        kw = {}
        if "key" in doc:
            k = doc.pop("key")
            kw["key"] = WatermarkKey(int(k["seed"]), int(k.get("n_bits", 32)))
        if "lr" in doc:
            kw["lr"] = LearningRates(**doc.pop("lr"))
        if "weights" in doc:
            kw["weights"] = LossWeights(**doc.pop("weights"))
        if "adam_betas" in doc:
            kw["adam_betas"] = tuple(doc.pop("adam_betas"))
        unknown = set(doc) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValidationError(f"unknown finetune config keys: {sorted(unknown)}")
        return cls(**doc, **kw)


# ---------------------------------------------------------------------------
# Gradient mask


@dataclass(frozen=True, eq=False)
class GradientMask:
    """Per-group, per-Gaussian positive weights summing to one. Positions are never masked."""

    z: dict[str, np.ndarray]
    beta: float

    def apply(self, grads: CloudGradients) -> CloudGradients:
        d = grads.as_dict()
        for name, z in self.z.items():
            g = d[name]
            d[name] = g * z.reshape((-1,) + (1,) * (g.ndim - 1))
        return CloudGradients(**d)


def group_magnitude(values: np.ndarray) -> np.ndarray:
    """Per-Gaussian |theta|: absolute value for scalars, L2 norm for vectors."""
    values = np.asarray(values, dtype=np.float64)
    return np.abs(values) if values.ndim == 1 else np.linalg.norm(values, axis=1)


def mask_weights(magnitude: np.ndarray, beta: float) -> np.ndarray:
    """w = exp(-|theta|^beta), normalized to sum to one.

    Normalization is done in log space so very large magnitudes (all w
    underflowing to zero) still give a valid mask; weights that would still
    underflow are floored at the smallest normal double to keep z > 0.
    """
    if not beta > 0:
        raise ValidationError("beta must be > 0")
    log_w = -np.power(np.abs(magnitude), beta)
    log_w -= log_w.max()
    w = np.maximum(np.exp(log_w), np.finfo(np.float64).tiny)
    return w / w.sum()


def build_gradient_mask(cloud: GaussianCloud, beta: float = 4.0) -> GradientMask:
    z = {name: mask_weights(group_magnitude(getattr(cloud, name)), beta) for name in MASKED_GROUPS}
    for a in z.values():
        a.setflags(write=False)
    return GradientMask(z, beta)


# ---------------------------------------------------------------------------
# Losses


class PerceptualPlugin(Protocol):
    def __call__(self, watermarked: np.ndarray, original: np.ndarray) -> tuple[float, np.ndarray]:
        """Return (loss value, dLoss/dwatermarked)."""


def _log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -x)


def message_loss(logits: np.ndarray, message: np.ndarray) -> tuple[float, np.ndarray]:
    """Summed binary cross-entropy in logit space, and its gradient."""
    x = np.asarray(logits, dtype=np.float64)
    m = np.asarray(message, dtype=np.float64)
    loss = -np.sum(m * _log_sigmoid(x) + (1.0 - m) * _log_sigmoid(-x))
    sig = np.exp(_log_sigmoid(x))
    return float(loss), sig - m


def mae(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    diff = np.asarray(a, dtype=np.float64) - b
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


@dataclass
class LossBreakdown:
    total: float
    rec: float
    lpips: float
    wavelet: float
    message: float


def compute_losses(watermarked: np.ndarray, original: np.ndarray, pyr_w: WaveletPyramid,
                   pyr_o: WaveletPyramid, logits: np.ndarray, message: np.ndarray,
                   weights: LossWeights = LossWeights(),
                   perceptual: PerceptualPlugin | None = None) -> tuple[float, LossBreakdown, dict]:
    """Weighted total loss.

    Returns (total, breakdown, grads) where ``grads`` holds dL/dimage from the
    pixel terms, dL/d(subband) pyramid from the wavelet term and dL/dlogits.
    """
    for name, arr in (("watermarked", watermarked), ("original", original), ("logits", logits)):
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"compute_losses: non-finite {name}")
    rec, g_rec = mae(watermarked, original)

    levels = []
    l_w = 0.0
    for lv_w, lv_o in zip(pyr_w.levels, pyr_o.levels):
        bands = {"LL": np.zeros_like(lv_w["LL"])}
        for s in DETAIL_SUBBANDS:
            v, g = mae(lv_w[s], lv_o[s])
            l_w += v
            bands[s] = g
        levels.append(bands)
    g_pyr = WaveletPyramid(tuple(levels))

    l_m, g_logits = message_loss(logits, message)

    l_p = 0.0
    g_img = weights.lambda_rec * g_rec
    if perceptual is not None and weights.lambda_lpips > 0:
        l_p, g_p = perceptual(watermarked, original)
        g_img = g_img + weights.lambda_lpips * np.asarray(g_p)
    total = weights.lambda_rec * rec + weights.lambda_lpips * l_p + weights.lambda_w * l_w + weights.lambda_m * l_m
    if not math.isfinite(total):
        raise NumericError("compute_losses: non-finite total loss")
    breakdown = LossBreakdown(total, rec, l_p, l_w, l_m)
    grads = {
        "image": g_img,
        "pyramid": g_pyr.map(lambda a: weights.lambda_w * a),
        "logits": weights.lambda_m * g_logits,
    }
    return total, breakdown, grads


def total_loss_and_image_grad(watermarked: np.ndarray, original: np.ndarray, decoder: FrozenDecoder,
                              message: np.ndarray, weights: LossWeights,
                              perceptual: PerceptualPlugin | None = None,
                              pyr_o: WaveletPyramid | None = None) -> tuple[LossBreakdown, np.ndarray, np.ndarray]:
    """Loss breakdown, dL/dimage (through DWT and decoder) and the logits."""
    pyr_w = dwt2(watermarked, WAVELET_LEVELS)
    if pyr_o is None:
        pyr_o = dwt2(original, WAVELET_LEVELS)
    logits = decode(decoder, decoder_input(decoder, watermarked))
    _, parts, g = compute_losses(watermarked, original, pyr_w, pyr_o, logits, message, weights, perceptual)
    g_image = g["image"] + idwt2(g["pyramid"])
    g_in = decode_backward(decoder, g["logits"])
    if decoder.domain == "ll2":
        zeros = WaveletPyramid(tuple({k: np.zeros_like(v) for k, v in lv.items()} for lv in pyr_w.levels))
        levels = list(zeros.levels)
        levels[-1] = {**levels[-1], "LL": g_in}
        g_image = g_image + idwt2(WaveletPyramid(tuple(levels)))
    else:
        g_image = g_image + g_in
    return parts, g_image, logits


# ---------------------------------------------------------------------------
# Optimizer


class Adam:
    """Bias-corrected Adam over a dict of parameter arrays."""

    def __init__(self, lrs: dict[str, float], betas=(0.9, 0.999), eps: float = 1e-15):
        self.lrs = dict(lrs)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.t += 1
        out = {}
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name, np.zeros_like(p))
            v = self.v.get(name, np.zeros_like(p))
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - self.b1**self.t)
            v_hat = v / (1 - self.b2**self.t)
            out[name] = p - self.lrs[name] * m_hat / (np.sqrt(v_hat) + self.eps)
        return out


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class EpochRecord:
    epoch: int
    total: float
    rec: float
    lpips: float
    wavelet: float
    message: float
    bit_accuracy: float
    psnr: float

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class TrainingLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    aborted: bool = False
    message: str = ""

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_json(), sort_keys=True) + "\n" for r in self.epochs)


def decoder_for(cfg: FinetuneConfig, image_shape: tuple[int, int]) -> FrozenDecoder:
    h, w = image_shape
    if cfg.decoder_domain == "ll2":
        return build_decoder(cfg.key, (h // 4, w // 4), grid=cfg.grid, domain="ll2", reject=cfg.reject)
    return build_decoder(cfg.key, (h, w), grid=min(h, w), domain="pixel", reject=cfg.reject)


def evaluate_views(cloud: GaussianCloud, training_set: TrainingSet, originals: list[np.ndarray],
                   decoder: FrozenDecoder) -> tuple[float, float]:
    """Mean bit accuracy and mean PSNR against ``originals`` over all views."""
    accs, ps = [], []
    for cam, orig in zip(training_set.cameras, originals):
        img = rasterize(cloud, cam).image
        accs.append(bit_accuracy(extract_bits(decoder, img), decoder.key))
        ps.append(psnr(img, orig))
    return float(np.mean(accs)), float(np.mean(ps))


def finetune(cloud: GaussianCloud, training_set: TrainingSet, cfg: FinetuneConfig = FinetuneConfig(),
             perceptual: PerceptualPlugin | None = None,
             on_epoch: Callable[[EpochRecord], None] | None = None) -> tuple[GaussianCloud, TrainingLog]:
    """Embed ``cfg.key``'s message into ``cloud``.

    Targets are the input cloud's own renders. Each epoch visits every view
    once in a seeded shuffled order; gradients of all groups except positions
    are multiplied by the gradient mask before the Adam step.
    """
    cams = training_set.cameras
    shapes = {c.shape for c in cams}
    if len(shapes) != 1:
        raise ValidationError("all views must share one resolution")
    decoder = decoder_for(cfg, cams[0].shape)
    message = decoder.key.message
    originals = [rasterize(cloud, cam).image for cam in cams]
    pyr_originals = [dwt2(o, WAVELET_LEVELS) for o in originals]
    mask = build_gradient_mask(cloud, cfg.beta) if cfg.use_mask else None
    opt = Adam(asdict(cfg.lr), cfg.adam_betas, cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)
    params = {k: np.array(v) for k, v in cloud.params().items()}
    current = cloud
    train_log = TrainingLog()

    for epoch in range(1, cfg.epochs + 1):
        sums = np.zeros(5)
        order = rng.permutation(len(cams))
        for k in order:
            cam = cams[k]
            fwd = rasterize(current, cam)
            try:
                parts, g_img, _ = total_loss_and_image_grad(
                    fwd.image, originals[k], decoder, message, cfg.weights, perceptual, pyr_originals[k]
                )
            except NumericError as exc:
                train_log.aborted = True
                train_log.message = f"epoch {epoch}: {exc}"
                log.error("fine-tuning diverged: %s", train_log.message)
                raise
            sums += [parts.total, parts.rec, parts.lpips, parts.wavelet, parts.message]
            grads = rasterize_backward(current, cam, g_img, forward=fwd)
            if mask is not None:
                grads = mask.apply(grads)
            params = opt.step(params, grads.as_dict())
            if not all(np.all(np.isfinite(v)) for v in params.values()):
                train_log.aborted = True
                train_log.message = f"epoch {epoch}: non-finite parameters"
                raise NumericError(train_log.message)
            moved = np.any(params["rotations"] != current.rotations, axis=1)
            if np.any(moved):
                q = params["rotations"]
                with np.errstate(over="ignore"):
                    norms = np.linalg.norm(q[moved], axis=1, keepdims=True)
                if not np.all(np.isfinite(norms) & (norms > 0)):
                    train_log.aborted = True
                    train_log.message = f"epoch {epoch}: quaternion norm overflow"
                    raise NumericError(train_log.message)
                q[moved] /= norms
            current = GaussianCloud(**params)
        acc, p = evaluate_views(current, training_set, originals, decoder)
        mean = sums / len(cams)
        rec = EpochRecord(epoch, *[float(x) for x in mean], bit_accuracy=acc, psnr=p)
        train_log.epochs.append(rec)
        log.info("epoch %d: loss %.4f  L_m %.3f  acc %.3f  psnr %.2f", epoch, rec.total, rec.message, acc, p)
        if on_epoch is not None:
            on_epoch(rec)
    return current, train_log
