"""CPU splat rasterizer with an analytic backward pass.

The forward pass projects every Gaussian to a 2D footprint, sorts by depth
(ties by index) and alpha-blends front to back. Everything is evaluated as
dense (visible Gaussians x pixels) arrays, which is fast enough for the small
scenes this package targets and keeps accumulation order fixed, so results
are bit-identical between runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .scene import CameraView, GaussianCloud

NEAR_PLANE = 0.2
DILATION = 0.3
ALPHA_MAX = 0.99
T_STOP = 1e-4
EPS_TRACK = 1e-4
CULL_SIGMA = 3.0


@dataclass(frozen=True)
class Projected2DGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    source_index: int


@dataclass(frozen=True)
class CloudGradients:
    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    @classmethod
    def zeros_like(cls, cloud: GaussianCloud) -> "CloudGradients":
        return cls(**{k: np.zeros_like(v) for k, v in cloud.params().items()})

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "positions": self.positions,
            "rotations": self.rotations,
            "log_scales": self.log_scales,
            "opacity_logits": self.opacity_logits,
            "colors": self.colors,
        }


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """(K, 4) unit quaternions (w, x, y, z) -> (K, 3, 3) rotation matrices."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        -2,
    )


def _rotmat_backward(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g00, g01, g02 = g[:, 0, 0], g[:, 0, 1], g[:, 0, 2]
    g10, g11, g12 = g[:, 1, 0], g[:, 1, 1], g[:, 1, 2]
    g20, g21, g22 = g[:, 2, 0], g[:, 2, 1], g[:, 2, 2]
    gw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    gx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12 + z * g20 + w * g21 - 2 * x * g22)
    gy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2 * y * g22)
    gz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11 + y * g12 + x * g20 + y * g21)
    return np.stack([gw, gx, gy, gz], -1)


@dataclass
class _Projection:
    """Vectorized projection of the visible subset, plus backward intermediates."""

    index: np.ndarray  # visible source indices, in depth order
    mean2d: np.ndarray  # (K, 2)
    cov2d: np.ndarray  # (K, 2, 2), dilated
    conic: np.ndarray  # (K, 2, 2)
    depth: np.ndarray
    t_cam: np.ndarray
    quat: np.ndarray  # normalized
    quat_norm: np.ndarray
    rot: np.ndarray
    scale: np.ndarray
    m_mat: np.ndarray  # R(q) diag(scale)
    cov3d: np.ndarray
    a_mat: np.ndarray  # J W


def _project(cloud: GaussianCloud, view: CameraView) -> _Projection:
    w_rot = view.rotation
    t_all = cloud.positions @ w_rot.T + view.translation
    depth_all = t_all[:, 2]
    visible = np.flatnonzero(depth_all > NEAR_PLANE)
    order = np.lexsort((visible, depth_all[visible]))
    idx = visible[order]

    t = t_all[idx]
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    q_raw = cloud.rotations[idx]
    qn_norm = np.linalg.norm(q_raw, axis=1)
    q = q_raw / qn_norm[:, None]
    rot = quat_to_rotmat(q)
    scale = np.exp(cloud.log_scales[idx])
    m_mat = rot * scale[:, None, :]
    cov3d = m_mat @ np.swapaxes(m_mat, 1, 2)

    k = len(idx)
    jac = np.zeros((k, 2, 3))
    jac[:, 0, 0] = view.fx / z
    jac[:, 0, 2] = -view.fx * x / z**2
    jac[:, 1, 1] = view.fy / z
    jac[:, 1, 2] = -view.fy * y / z**2
    a_mat = jac @ w_rot
    cov2d = a_mat @ cov3d @ np.swapaxes(a_mat, 1, 2)
    cov2d[:, 0, 0] += DILATION
    cov2d[:, 1, 1] += DILATION
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    conic = np.empty_like(cov2d)
    conic[:, 0, 0] = cov2d[:, 1, 1] / det
    conic[:, 1, 1] = cov2d[:, 0, 0] / det
    conic[:, 0, 1] = -cov2d[:, 0, 1] / det
    conic[:, 1, 0] = -cov2d[:, 1, 0] / det
    mean2d = np.stack([view.fx * x / z + view.cx, view.fy * y / z + view.cy], -1)
    return _Projection(idx, mean2d, cov2d, conic, z, t, q, qn_norm, rot, scale, m_mat, cov3d, a_mat)


def project(cloud: GaussianCloud, view: CameraView) -> list[Projected2DGaussian]:
    """2D footprints of every Gaussian in front of the near plane, in depth order."""
    p = _project(cloud, view)
    return [
        Projected2DGaussian(p.mean2d[k].copy(), p.cov2d[k].copy(), float(p.depth[k]), int(p.index[k]))
        for k in range(len(p.index))
    ]


@dataclass(eq=False)
class RenderOutput:
    """Rendered image plus per-pixel blending state.

    ``alpha`` and ``transmittance`` are (K, H*W) arrays over the visible
    Gaussians listed in ``order`` (depth-sorted source indices); entries past
    early termination or outside a footprint are zero.
    """

    image: np.ndarray
    final_transmittance: np.ndarray
    order: np.ndarray
    alpha: np.ndarray
    transmittance: np.ndarray
    n_gaussians: int
    _proj: _Projection | None = None
    _raw_alpha: np.ndarray | None = None
    _gauss: np.ndarray | None = None
    _colors: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[:2]

    @property
    def weights(self) -> np.ndarray:
        """Blend weights alpha * T, shape (K, H*W) in ``order``."""
        return self.alpha * self.transmittance

    def contributors(self, x: int, y: int) -> Iterator[tuple[int, float, float]]:
        """(source_index, alpha, T) in blend order for pixel (x, y), weight >= EPS_TRACK."""
        p = y * self.image.shape[1] + x
        a = self.alpha[:, p]
        t = self.transmittance[:, p]
        for k in np.flatnonzero(a * t >= EPS_TRACK):
            yield int(self.order[k]), float(a[k]), float(t[k])

    def tracked(self, pixel_mask: np.ndarray | None = None) -> np.ndarray:
        """Source indices with weight >= EPS_TRACK on any pixel in ``pixel_mask`` (H x W bool)."""
        w = self.weights
        if pixel_mask is not None:
            w = w[:, np.asarray(pixel_mask, dtype=bool).reshape(-1)]
        hit = np.any(w >= EPS_TRACK, axis=1) if w.shape[1] else np.zeros(len(self.order), bool)
        return np.sort(self.order[hit])

    def dense_weights(self) -> np.ndarray:
        """Blend weights scattered to (N_G, H*W) in source order."""
        out = np.zeros((self.n_gaussians, self.alpha.shape[1]))
        out[self.order] = self.weights
        return out


def _pixel_grid(view: CameraView) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0 : view.height, 0 : view.width]
    return xs.reshape(-1).astype(np.float64), ys.reshape(-1).astype(np.float64)


def rasterize(cloud: GaussianCloud, view: CameraView, colors: np.ndarray | None = None,
              clamp_colors: bool = True) -> RenderOutput:
    """Render ``cloud`` from ``view``.

    ``colors`` overrides the cloud's colors (used for the auxiliary
    contribution render); ``clamp_colors=False`` blends them unclamped.
    """
    proj = _project(cloud, view)
    px, py = _pixel_grid(view)
    n_pix = px.size
    k = len(proj.index)
    if colors is None:
        colors = cloud.colors
    colors = np.asarray(colors, dtype=np.float64)
    col = colors[proj.index]
    if clamp_colors:
        col = np.clip(col, 0.0, 1.0)

    if k == 0:
        empty = np.zeros((0, n_pix))
        return RenderOutput(
            image=np.zeros((view.height, view.width, 3)),
            final_transmittance=np.ones((view.height, view.width)),
            order=proj.index,
            alpha=empty,
            transmittance=empty,
            n_gaussians=len(cloud),
            _proj=proj,
            _raw_alpha=empty,
            _gauss=empty,
            _colors=col,
        )

    dx = px[None, :] - proj.mean2d[:, 0:1]
    dy = py[None, :] - proj.mean2d[:, 1:2]
    ca = proj.conic[:, 0, 0:1]
    cb = proj.conic[:, 0, 1:2]
    cc = proj.conic[:, 1, 1:2]
    power = -0.5 * (ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy)
    half_w = CULL_SIGMA * np.sqrt(proj.cov2d[:, 0, 0:1])
    half_h = CULL_SIGMA * np.sqrt(proj.cov2d[:, 1, 1:2])
    inside = (np.abs(dx) <= half_w) & (np.abs(dy) <= half_h)
    gauss = np.where(inside, np.exp(np.minimum(power, 0.0)), 0.0)
    sigma = 1.0 / (1.0 + np.exp(-cloud.opacity_logits[proj.index]))
    raw_alpha = sigma[:, None] * gauss
    alpha = np.minimum(raw_alpha, ALPHA_MAX)

    t_next = np.cumprod(1.0 - alpha, axis=0)
    # a Gaussian that would push T below T_STOP is not blended and ends the pixel
    included = t_next >= T_STOP
    alpha = np.where(included, alpha, 0.0)
    trans = np.empty_like(alpha)
    trans[0] = 1.0
    trans[1:] = t_next[:-1]
    trans = np.where(included, trans, 0.0)
    final_t = np.prod(1.0 - alpha, axis=0)

    weights = alpha * trans
    image = (weights.T @ col).reshape(view.height, view.width, 3)
    return RenderOutput(
        image=image,
        final_transmittance=final_t.reshape(view.height, view.width),
        order=proj.index,
        alpha=alpha,
        transmittance=trans,
        n_gaussians=len(cloud),
        _proj=proj,
        _raw_alpha=raw_alpha,
        _gauss=gauss,
        _colors=col,
    )


def rasterize_backward(cloud: GaussianCloud, view: CameraView, dL_dimage: np.ndarray,
                       forward: RenderOutput | None = None, colors: np.ndarray | None = None,
                       clamp_colors: bool = True) -> CloudGradients:
    """Gradients of a scalar loss w.r.t. every cloud parameter, given dL/dimage.

    ``forward`` may pass the matching :func:`rasterize` output to skip the
    recomputation; it must come from the same cloud, view and color options.
    """
    if forward is None:
        forward = rasterize(cloud, view, colors=colors, clamp_colors=clamp_colors)
    proj = forward._proj
    grads = {k: np.zeros_like(v) for k, v in cloud.params().items()}
    k = len(proj.index)
    g_img = np.asarray(dL_dimage, dtype=np.float64).reshape(-1, 3)
    if k == 0 or not np.any(g_img):
        return CloudGradients(**grads)

    idx = proj.index
    alpha = forward.alpha
    trans = forward.transmittance
    weights = alpha * trans
    col = forward._colors

    # colors
    g_col = weights @ g_img
    src_col = cloud.colors if colors is None else np.asarray(colors, dtype=np.float64)
    if clamp_colors:
        c_raw = src_col[idx]
        g_col = g_col * ((c_raw >= 0.0) & (c_raw <= 1.0))
    grads["colors"][idx] = g_col

    # dI/dalpha_k = c_k T_k - (sum_{j>k} c_j w_j) / (1 - alpha_k)
    g_alpha = trans * (col @ g_img.T)
    one_minus = 1.0 - alpha
    for ch in range(3):
        cw = weights * col[:, ch : ch + 1]
        suffix = np.cumsum(cw[::-1], axis=0)[::-1] - cw
        g_alpha -= g_img[None, :, ch] * suffix / one_minus
    active = (alpha > 0) & (forward._raw_alpha < ALPHA_MAX)
    g_raw = np.where(active, g_alpha, 0.0)

    gauss = forward._gauss
    logits = cloud.opacity_logits[idx]
    sigma = 1.0 / (1.0 + np.exp(-logits))
    g_sigma = np.sum(g_raw * gauss, axis=1)
    grads["opacity_logits"][idx] = g_sigma * sigma * (1.0 - sigma)

    g_power = g_raw * sigma[:, None] * gauss
    px, py = _pixel_grid(view)
    dx = px[None, :] - proj.mean2d[:, 0:1]
    dy = py[None, :] - proj.mean2d[:, 1:2]
    ca = proj.conic[:, 0, 0:1]
    cb = proj.conic[:, 0, 1:2]
    cc = proj.conic[:, 1, 1:2]
    g_mean = np.stack(
        [np.sum(g_power * (ca * dx + cb * dy), axis=1), np.sum(g_power * (cb * dx + cc * dy), axis=1)], -1
    )
    g_conic = np.empty((k, 2, 2))
    g_conic[:, 0, 0] = -0.5 * np.sum(g_power * dx * dx, axis=1)
    g_conic[:, 1, 1] = -0.5 * np.sum(g_power * dy * dy, axis=1)
    g_conic[:, 0, 1] = g_conic[:, 1, 0] = -0.5 * np.sum(g_power * dx * dy, axis=1)
    conic = proj.conic
    g_cov2d = -conic @ g_conic @ conic

    _projection_backward(proj, view, g_mean, g_cov2d, grads)
    return CloudGradients(**grads)


def _projection_backward(proj: _Projection, view: CameraView, g_mean: np.ndarray, g_cov2d: np.ndarray,
                         grads: dict[str, np.ndarray]) -> None:
    idx = proj.index
    a_mat = proj.a_mat
    cov3d = proj.cov3d
    a_t = np.swapaxes(a_mat, 1, 2)
    g_a = 2.0 * g_cov2d @ a_mat @ cov3d
    g_cov3d = a_t @ g_cov2d @ a_mat
    g_jac = g_a @ view.rotation.T

    x, y, z = proj.t_cam[:, 0], proj.t_cam[:, 1], proj.t_cam[:, 2]
    fx, fy = view.fx, view.fy
    g_t = np.empty((len(idx), 3))
    g_t[:, 0] = g_jac[:, 0, 2] * (-fx / z**2) + g_mean[:, 0] * fx / z
    g_t[:, 1] = g_jac[:, 1, 2] * (-fy / z**2) + g_mean[:, 1] * fy / z
    g_t[:, 2] = (
        g_jac[:, 0, 0] * (-fx / z**2)
        + g_jac[:, 0, 2] * (2 * fx * x / z**3)
        + g_jac[:, 1, 1] * (-fy / z**2)
        + g_jac[:, 1, 2] * (2 * fy * y / z**3)
        - g_mean[:, 0] * fx * x / z**2
        - g_mean[:, 1] * fy * y / z**2
    )
    grads["positions"][idx] = g_t @ view.rotation

    g_m = 2.0 * g_cov3d @ proj.m_mat
    g_rot = g_m * proj.scale[:, None, :]
    g_scale = np.sum(g_m * proj.rot, axis=1)
    grads["log_scales"][idx] = g_scale * proj.scale
    g_qn = _rotmat_backward(proj.quat, g_rot)
    q = proj.quat
    g_q = (g_qn - q * np.sum(q * g_qn, axis=1, keepdims=True)) / proj.quat_norm[:, None]
    grads["rotations"][idx] = g_q
