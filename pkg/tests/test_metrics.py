import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from splatmark.decoder import WatermarkKey
from splatmark.errors import ValidationError
from splatmark.metrics import PSNR_CAP, bit_accuracy, psnr, psnr_capped, ssim


def psnr_loop(a, b):
    total = 0.0
    count = 0
    for v, w in zip(a.reshape(-1), b.reshape(-1)):
        total += (float(v) - float(w)) ** 2
        count += 1
    return 10 * math.log10(count / total)


def ssim_loop(a, b):
    """Scalar-loop SSIM: 11x11 Gaussian window (sigma 1.5), valid positions, channel mean."""
    r = np.arange(11) - 5
    g1 = np.exp(-(r**2) / (2 * 1.5**2))
    win = np.outer(g1, g1)
    win /= win.sum()
    c1, c2 = 0.01**2, 0.03**2
    h, w, nc = a.shape
    vals = []
    for c in range(nc):
        acc = 0.0
        n = 0
        for i in range(h - 10):
            for j in range(w - 10):
                pa = a[i : i + 11, j : j + 11, c]
                pb = b[i : i + 11, j : j + 11, c]
                mx = float(np.sum(win * pa))
                my = float(np.sum(win * pb))
                sxx = float(np.sum(win * pa * pa)) - mx * mx
                syy = float(np.sum(win * pb * pb)) - my * my
                sxy = float(np.sum(win * pa * pb)) - mx * my
                acc += ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
                n += 1
        vals.append(acc / n)
    return float(np.mean(vals))


def test_psnr_examples():
    z = np.zeros((4, 4, 3))
    assert psnr_capped(z, z) == (PSNR_CAP, True)
    assert psnr(z, np.ones_like(z)) == 0.0
    assert math.isclose(psnr(z, np.full_like(z, 0.1)), 20.0, rel_tol=1e-12)
    with pytest.raises(ValidationError):
        psnr(z, np.zeros((4, 5, 3)))


def test_psnr_and_ssim_match_loop_references(rng):
    a = rng.random((16, 18, 3))
    b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
    assert abs(psnr(a, b) - psnr_loop(a, b)) < 1e-9
    assert abs(ssim(a, b) - ssim_loop(a, b)) < 1e-9


def test_ssim_examples(rng):
    a = 0.25 + 0.5 * rng.random((24, 24, 3))
    assert math.isclose(ssim(a, a), 1.0, rel_tol=0, abs_tol=1e-12)
    assert ssim(a, 1 - a) < 0.5
    c = np.full((16, 16, 3), 0.4)
    assert math.isclose(ssim(c, c.copy()), 1.0, abs_tol=1e-12)
    with pytest.raises(ValidationError):
        ssim(np.zeros((10, 20, 3)), np.zeros((10, 20, 3)))


@given(st.lists(st.integers(0, 1), min_size=1, max_size=64))
def test_bit_accuracy_properties(bits):
    m = np.array(bits)
    assert bit_accuracy(m, m) == 1.0
    assert bit_accuracy(1 - m, m) == 0.0


def test_bit_accuracy_with_key():
    k = WatermarkKey(4, 32)
    half = k.message.copy()
    half[:16] = 1 - half[:16]
    assert bit_accuracy(half, k) == 0.5
    with pytest.raises(ValidationError):
        bit_accuracy(np.zeros(31), k)
