"""Image-quality and watermark metrics."""

from __future__ import annotations

import numpy as np

from .errors import ValidationError

PSNR_CAP = 99.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB for images in [0, 1]; identical images give ``PSNR_CAP``."""
    value, _ = psnr_capped(a, b)
    return value


def psnr_capped(a: np.ndarray, b: np.ndarray) -> tuple[float, bool]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP, True
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)), False


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable 'valid' correlation with the outer product g g^T
    k = len(g)
    tmp = sum(g[i] * x[i : x.shape[0] - k + 1 + i] for i in range(k))
    return sum(g[j] * tmp[:, j : x.shape[1] - k + 1 + j] for j in range(k))


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), averaged over channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < 11:
        raise ValidationError("ssim needs images of at least 11 x 11 pixels")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    win = _gaussian_kernel()
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx = _filter_valid(x, win)
        my = _filter_valid(y, win)
        sxx = _filter_valid(x * x, win) - mx * mx
        syy = _filter_valid(y * y, win) - my * my
        sxy = _filter_valid(x * y, win) - mx * my
        smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        vals.append(float(np.mean(smap)))
    return float(np.mean(vals))


def bit_accuracy(extracted, message) -> float:
    """Fraction of positions where ``extracted`` equals ``message``.

    ``message`` may be a bit array or anything with a ``message`` attribute
    (a :class:`~splatmark.decoder.WatermarkKey`).
    """
    if hasattr(message, "message"):
        message = message.message
    e = np.asarray(extracted).reshape(-1)
    m = np.asarray(message).reshape(-1)
    if e.shape != m.shape:
        raise ValidationError(f"bit_accuracy: length {e.size} != {m.size}")
    if e.size == 0:
        raise ValidationError("bit_accuracy: empty bit strings")
    return float(np.mean(e.astype(np.int64) == m.astype(np.int64)))
