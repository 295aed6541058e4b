"""Frequency-guided densification.

Phase one prunes Gaussians whose error-weighted blend weight (the gradient of
an auxiliary loss w.r.t. zeroed stand-in colors) is negligible in every view.
Phase two scores image patches by high-frequency energy and splits the
low-contribution Gaussians that cover the strongest patches.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ValidationError
from .freq import PatchSpectrumScore, patch_intensity
from .metrics import psnr
from .render import RenderOutput, quat_to_rotmat, rasterize
from .scene import GaussianCloud, TrainingSet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FgdConfig:
    prune_threshold: float = 1e-8
    patch_size: int = 16
    top_k_percent: float = 1.0
    split_quantile: float = 0.5
    split_scale_divisor: float = 1.6
    aggregation: str = "max"
    channel_reduce: str = "mean"

    def __post_init__(self):
        if not 0 <= self.top_k_percent <= 100:
            raise ValidationError("top_k_percent must lie in [0, 100]")
        if self.patch_size < 2:
            raise ValidationError("patch_size must be >= 2")
        if self.prune_threshold < 0:
            raise ValidationError("prune_threshold must be >= 0")
        if not 0 <= self.split_quantile <= 1:
            raise ValidationError("split_quantile must lie in [0, 1]")
        if self.split_scale_divisor <= 0:
            raise ValidationError("split_scale_divisor must be positive")
        if self.aggregation not in ("max", "sum"):
            raise ValidationError("aggregation must be 'max' or 'sum'")
        if self.channel_reduce not in ("mean", "sum"):
            raise ValidationError("channel_reduce must be 'mean' or 'sum'")


@dataclass(frozen=True, eq=False)
class ContributionMap:
    per_channel: np.ndarray  # (N, 3), aggregated over views
    per_view: np.ndarray  # (views, N, 3)

    @property
    def reduced(self) -> np.ndarray:
        return np.mean(np.abs(self.per_channel), axis=1)

    def __len__(self) -> int:
        return len(self.per_channel)

    def subset(self, index) -> "ContributionMap":
        return ContributionMap(self.per_channel[index], self.per_view[:, index])


def view_contribution(cloud: GaussianCloud, camera, gt: np.ndarray,
                      render: RenderOutput | None = None) -> np.ndarray:
    """(N, 3) gradient of the auxiliary loss w.r.t. stand-in colors held at zero.

    With all stand-in colors zero the auxiliary render is black, so the error
    map equals the ground truth and each Gaussian's gradient is the
    error-weighted sum of its blend weights over pixels, divided by H*W.
    """
    if render is None:
        render = rasterize(cloud, camera, colors=np.zeros((len(cloud), 3)), clamp_colors=False)
    h, w = gt.shape[:2]
    err = np.abs(0.0 - np.asarray(gt, dtype=np.float64)).reshape(-1, 3)
    out = np.zeros((len(cloud), 3))
    out[render.order] = render.weights @ err / (h * w)
    return out


def auxiliary_loss(cloud: GaussianCloud, camera, gt: np.ndarray, aux_colors: np.ndarray) -> float:
    """Mean over pixels of |I' - I_gt| * I' summed over channels, I' rendered with ``aux_colors``."""
    img = rasterize(cloud, camera, colors=aux_colors, clamp_colors=False).image
    h, w = gt.shape[:2]
    return float(np.sum(np.abs(img - gt) * img) / (h * w))


def measure_contribution(cloud: GaussianCloud, training_set: TrainingSet,
                         aggregation: str = "max") -> ContributionMap:
    per_view = np.stack([view_contribution(cloud, cam, gt) for cam, gt in training_set])
    if aggregation == "max":
        agg = np.max(np.abs(per_view), axis=0)
    elif aggregation == "sum":
        agg = np.sum(np.abs(per_view), axis=0)
    else:
        raise ValidationError("aggregation must be 'max' or 'sum'")
    return ContributionMap(agg, per_view)


def prune(cloud: GaussianCloud, contrib: ContributionMap, threshold: float) -> tuple[GaussianCloud, np.ndarray]:
    """Drop Gaussians whose reduced contribution is below ``threshold``."""
    if not threshold >= 0:
        raise ValidationError("prune threshold must be >= 0")
    if len(contrib) != len(cloud):
        raise ValidationError("contribution map does not match the cloud")
    v = contrib.reduced
    removed = np.flatnonzero(v < threshold)
    if removed.size == len(cloud):
        raise ValidationError(f"threshold {threshold:g} would prune all {len(cloud)} Gaussians")
    keep = np.flatnonzero(v >= threshold)
    return cloud.subset(keep), removed


def select_high_freq_patches(render: RenderOutput | np.ndarray, cfg: FgdConfig) -> list[PatchSpectrumScore]:
    """Top-K% of non-overlapping patches by high-frequency intensity.

    Ties keep raster order; partial patches at the right/bottom border are skipped.
    """
    image = render.image if isinstance(render, RenderOutput) else np.asarray(render)
    h, w = image.shape[:2]
    p = cfg.patch_size
    scores = []
    for y in range(0, h - p + 1, p):
        for x in range(0, w - p + 1, p):
            e = patch_intensity(image[y : y + p, x : x + p], channel_reduce=cfg.channel_reduce)
            scores.append(PatchSpectrumScore((x, y), e))
    if not scores:
        return []
    n_take = math.ceil(cfg.top_k_percent / 100.0 * len(scores) - 1e-12)
    # stable sort keeps raster order among equal intensities
    ranked = sorted(range(len(scores)), key=lambda k: -scores[k].intensity)
    return [scores[k] for k in ranked[:n_take]]


def split_gaussians(cloud: GaussianCloud, selected: np.ndarray, scale_divisor: float = 1.6) -> GaussianCloud:
    """Replace each selected Gaussian by two children along its longest axis.

    Children sit at mu -/+ axis * (largest std / 2), shrink every scale by
    ``scale_divisor`` and copy opacity, rotation and color. They take the
    parent's slot, minus-offset child first.
    """
    selected = np.unique(np.asarray(selected, dtype=int))
    if selected.size == 0:
        return cloud
    is_sel = np.zeros(len(cloud), bool)
    is_sel[selected] = True
    rot = quat_to_rotmat(cloud.rotations[selected] / np.linalg.norm(cloud.rotations[selected], axis=1, keepdims=True))
    axis_idx = np.argmax(cloud.log_scales[selected], axis=1)
    axis = rot[np.arange(len(selected)), :, axis_idx]
    offset = axis * (np.exp(cloud.log_scales[selected].max(axis=1)) / 2)[:, None]
    offsets = np.zeros((len(cloud), 3))
    offsets[selected] = offset

    reps = np.where(is_sel, 2, 1)
    src = np.repeat(np.arange(len(cloud)), reps)
    # children: minus offset in the parent's slot, plus offset right after
    sign = np.zeros(len(src))
    starts = np.cumsum(reps) - reps
    sign[starts[selected]] = -1.0
    sign[starts[selected] + 1] = 1.0
    positions = cloud.positions[src] + sign[:, None] * offsets[src]
    log_scales = cloud.log_scales[src] - np.where(is_sel[src], np.log(scale_divisor), 0.0)[:, None]
    return GaussianCloud(
        positions=positions,
        rotations=cloud.rotations[src],
        log_scales=log_scales,
        opacity_logits=cloud.opacity_logits[src],
        colors=cloud.colors[src],
    )


def split_candidates(renders: list[RenderOutput], patches: list[list[PatchSpectrumScore]],
                     contrib: ContributionMap, cfg: FgdConfig) -> np.ndarray:
    """Indices of low-contribution Gaussians tracked inside the selected patches."""
    tracked = []
    for render, sel in zip(renders, patches):
        if not sel:
            continue
        h, w = render.shape
        mask = np.zeros((h, w), bool)
        for s in sel:
            x, y = s.patch_origin
            mask[y : y + cfg.patch_size, x : x + cfg.patch_size] = True
        tracked.append(render.tracked(mask))
    if not tracked:
        return np.zeros(0, int)
    cand = np.unique(np.concatenate(tracked))
    if cand.size == 0:
        return cand
    v = contrib.reduced[cand]
    cutoff = np.quantile(v, cfg.split_quantile)
    return cand[v <= cutoff]


def split_in_patches(cloud: GaussianCloud, renders: list[RenderOutput],
                     patches: list[list[PatchSpectrumScore]], contrib: ContributionMap,
                     cfg: FgdConfig) -> tuple[GaussianCloud, np.ndarray]:
    chosen = split_candidates(renders, patches, contrib, cfg)
    if chosen.size == 0:
        if any(patches):
            log.warning("no Gaussians tracked in the selected patches; nothing split")
        return cloud, chosen
    return split_gaussians(cloud, chosen, cfg.split_scale_divisor), chosen


@dataclass
class FgdReport:
    n_before: int
    n_removed: int
    n_split: int
    n_after: int
    removal_ratio: float
    psnr_before: list[float] = field(default_factory=list)
    psnr_after: list[float] = field(default_factory=list)
    psnr_delta: list[float] = field(default_factory=list)
    psnr_vs_original: list[float] = field(default_factory=list)
    selected_patches: list[list[list[int]]] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def run_fgd(cloud: GaussianCloud, training_set: TrainingSet, cfg: FgdConfig = FgdConfig()
            ) -> tuple[GaussianCloud, FgdReport]:
    """Prune, then split inside high-frequency patches. Deterministic."""
    before = [rasterize(cloud, cam).image for cam in training_set.cameras]
    contrib = measure_contribution(cloud, training_set, cfg.aggregation)
    pruned, removed = prune(cloud, contrib, cfg.prune_threshold)
    keep = np.setdiff1d(np.arange(len(cloud)), removed)
    contrib_kept = contrib.subset(keep)

    renders = [rasterize(pruned, cam) for cam in training_set.cameras]
    patches = [select_high_freq_patches(r, cfg) for r in renders]
    out, split = split_in_patches(pruned, renders, patches, contrib_kept, cfg)

    after = [rasterize(out, cam).image for cam in training_set.cameras]
    gts = training_set.images
    p_before = [psnr(b, g) for b, g in zip(before, gts)]
    p_after = [psnr(a, g) for a, g in zip(after, gts)]
    report = FgdReport(
        n_before=len(cloud),
        n_removed=int(removed.size),
        n_split=int(split.size),
        n_after=len(out),
        removal_ratio=removed.size / len(cloud),
        psnr_before=p_before,
        psnr_after=p_after,
        psnr_delta=[a - b for a, b in zip(p_after, p_before)],
        psnr_vs_original=[psnr(a, b) for a, b in zip(after, before)],
        selected_patches=[[list(s.patch_origin) for s in sel] for sel in patches],
        config=asdict(cfg),
    )
    log.info("FGD: %d -> %d Gaussians (%d removed, %d split)", report.n_before, report.n_after,
             report.n_removed, report.n_split)
    return out, report
