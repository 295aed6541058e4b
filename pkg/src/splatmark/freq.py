"""Patch spectra for high-frequency scoring, and an orthonormal Haar pyramid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

SUBBANDS = ("LL", "LH", "HL", "HH")
DETAIL_SUBBANDS = ("LH", "HL", "HH")


@dataclass(frozen=True)
class PatchSpectrumScore:
    patch_origin: tuple[int, int]  # (x, y) of the top-left pixel
    intensity: float


def _as_hwc(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3:
        raise ValidationError(f"expected an M x N x C array, got shape {a.shape}")
    return a


def dft2_real(patch: np.ndarray) -> np.ndarray:
    """Real part of the per-channel 2D DFT with DC moved to (M//2, N//2)."""
    p = _as_hwc(patch)
    if p.shape[0] < 2 or p.shape[1] < 2:
        raise ValidationError("dft2_real needs M, N >= 2")
    spec = np.fft.fft2(p, axes=(0, 1))
    return np.fft.fftshift(spec, axes=(0, 1)).real


def high_freq_mask(u_size: int, v_size: int) -> np.ndarray:
    """Q[u, v] = ((2u - U)/U)^2 + ((2v - V)/V)^2; zero at the centered DC bin."""
    if u_size < 2 or v_size < 2:
        raise ValidationError("high_freq_mask needs U, V >= 2")
    u = (2.0 * np.arange(u_size) - u_size) / u_size
    v = (2.0 * np.arange(v_size) - v_size) / v_size
    return u[:, None] ** 2 + v[None, :] ** 2


def patch_intensity(patch: np.ndarray, channel_reduce: str = "mean") -> float:
    """High-frequency energy score E of one patch.

    The absolute value of the centered real spectrum is weighted by the
    high-frequency mask, summed and divided by U*V per channel, then the
    channels are averaged (or summed with ``channel_reduce="sum"``).
    """
    p = _as_hwc(patch)
    spec = np.abs(dft2_real(p))
    q = high_freq_mask(p.shape[0], p.shape[1])
    per_channel = np.sum(spec * q[..., None], axis=(0, 1)) / (p.shape[0] * p.shape[1])
    if channel_reduce == "mean":
        return float(np.mean(per_channel))
    if channel_reduce == "sum":
        return float(np.sum(per_channel))
    raise ValidationError(f"unknown channel_reduce {channel_reduce!r}")


# ---------------------------------------------------------------------------
# Haar wavelets


@dataclass(frozen=True, eq=False)
class WaveletPyramid:
    """``levels[l-1]`` maps subband name to a (H/2^l, W/2^l, C) array."""

    levels: tuple[dict[str, np.ndarray], ...]

    @property
    def depth(self) -> int:
        return len(self.levels)

    def band(self, name: str, level: int) -> np.ndarray:
        return self.levels[level - 1][name]

    @property
    def ll(self) -> np.ndarray:
        """Coarsest approximation subband."""
        return self.levels[-1]["LL"]

    def energy(self) -> float:
        e = sum(float(np.sum(lv[s] ** 2)) for lv in self.levels for s in DETAIL_SUBBANDS)
        return e + float(np.sum(self.ll**2))

    def map(self, fn) -> "WaveletPyramid":
        return WaveletPyramid(tuple({k: fn(v) for k, v in lv.items()} for lv in self.levels))


def _haar_level(x: np.ndarray) -> dict[str, np.ndarray]:
    a = x[0::2, 0::2]
    b = x[0::2, 1::2]
    c = x[1::2, 0::2]
    d = x[1::2, 1::2]
    return {
        "LL": 0.5 * (a + b + c + d),
        "LH": 0.5 * (a + b - c - d),
        "HL": 0.5 * (a - b + c - d),
        "HH": 0.5 * (a - b - c + d),
    }


def _ihaar_level(bands: dict[str, np.ndarray], ll: np.ndarray) -> np.ndarray:
    lh, hl, hh = bands["LH"], bands["HL"], bands["HH"]
    h, w = ll.shape[:2]
    out = np.empty((2 * h, 2 * w) + ll.shape[2:])
    out[0::2, 0::2] = 0.5 * (ll + lh + hl + hh)
    out[0::2, 1::2] = 0.5 * (ll + lh - hl - hh)
    out[1::2, 0::2] = 0.5 * (ll - lh + hl - hh)
    out[1::2, 1::2] = 0.5 * (ll - lh - hl + hh)
    return out


def dwt2(image: np.ndarray, levels: int = 2) -> WaveletPyramid:
    """Channel-wise orthonormal 2D Haar analysis, each level applied to the previous LL.

    A 2D (H, W) input is treated as a single channel.
    """
    x = np.asarray(image, dtype=np.float64)
    squeeze = x.ndim == 2
    x = _as_hwc(x)
    if levels < 1:
        raise ValidationError("dwt2 needs at least one level")
    step = 2**levels
    if x.shape[0] % step or x.shape[1] % step:
        raise ValidationError(f"image {x.shape[:2]} is not divisible by 2^{levels}")
    out = []
    cur = x
    for _ in range(levels):
        bands = _haar_level(cur)
        out.append(bands)
        cur = bands["LL"]
    if squeeze:
        out = [{k: v[..., 0] for k, v in lv.items()} for lv in out]
    return WaveletPyramid(tuple(out))


def idwt2(pyramid: WaveletPyramid) -> np.ndarray:
    """Inverse of :func:`dwt2`; also its adjoint, since the transform is orthonormal.

    Only the coarsest LL is read; finer LL entries are ignored.
    """
    cur = pyramid.ll
    for lv in reversed(pyramid.levels):
        cur = _ihaar_level(lv, cur)
    return cur
