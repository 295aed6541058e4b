import numpy as np
import pytest
from hypothesis import given, strategies as st

from splatmark.decoder import (
    FrozenDecoder,
    WatermarkKey,
    build_decoder,
    decode,
    decode_backward,
    extract_bits,
    load_decoder,
    lowpass_basis,
    save_decoder,
)
from splatmark.errors import ValidationError


def test_key_validation():
    with pytest.raises(ValidationError):
        WatermarkKey(1, 16)
    with pytest.raises(ValidationError):
        WatermarkKey(-1, 32)
    assert WatermarkKey(5, 48).message.shape == (48,)


def test_message_and_decoder_are_seed_deterministic():
    k = WatermarkKey(42, 32)
    assert np.array_equal(k.message, WatermarkKey(42, 32).message)
    assert not np.array_equal(k.message, WatermarkKey(43, 32).message)
    a = build_decoder(k, (16, 16))
    b = build_decoder(k, (16, 16))
    assert np.array_equal(a.projection, b.projection)


def test_rows_orthonormal_and_reject_low_modes():
    d = build_decoder(WatermarkKey(3, 64), (16, 16))
    p = d.projection
    assert np.allclose(p @ p.T, np.eye(64), atol=1e-12)
    assert np.max(np.abs(p @ lowpass_basis(16, 4).T)) < 1e-12


def test_global_offset_does_not_change_logits(rng):
    d = build_decoder(WatermarkKey(3, 32), (16, 16))
    x = rng.random((16, 16, 3))
    assert np.allclose(decode(d, x), decode(d, x + 0.3), atol=1e-12)


@given(seed=st.integers(0, 2**31))
def test_decode_backward_is_exact_adjoint(seed):
    r = np.random.default_rng(seed)
    d = build_decoder(WatermarkKey(seed, 32), (20, 16), grid=8, reject=2)
    x = r.standard_normal((20, 16, 3))
    g = r.standard_normal(32)
    lhs = float(g @ (decode(d, x) - d.bias))
    rhs = float(np.sum(x * decode_backward(d, g)))
    assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


def test_decoder_is_immutable():
    d = build_decoder(WatermarkKey(0, 32), (16, 16))
    with pytest.raises(ValueError):
        d.projection[0, 0] = 1.0
    with pytest.raises(AttributeError):
        d.grid = 4


def test_rank_check():
    with pytest.raises(ValidationError):
        build_decoder(WatermarkKey(0, 64), (4, 4), grid=4, reject=2)  # 48 - 12 = 36 < 64


def test_input_shape_checks():
    d = build_decoder(WatermarkKey(0, 32), (16, 16))
    with pytest.raises(ValidationError):
        decode(d, np.zeros((8, 8, 3)))
    with pytest.raises(ValidationError):
        extract_bits(d, np.zeros((32, 32, 3)))


def test_json_round_trip(tmp_path):
    for domain, shape in (("ll2", (16, 16)), ("pixel", (64, 64))):
        d = build_decoder(WatermarkKey(9, 48), shape, grid=16, domain=domain)
        save_decoder(d, tmp_path / "d.json")
        e = load_decoder(tmp_path / "d.json")
        assert isinstance(e, FrozenDecoder)
        assert e.domain == domain and e.image_shape == d.image_shape
        assert np.array_equal(e.projection, d.projection)


def test_extract_bits_returns_binary(rng):
    d = build_decoder(WatermarkKey(1, 32), (16, 16))
    bits = extract_bits(d, rng.random((64, 64, 3)))
    assert bits.shape == (32,) and set(np.unique(bits)) <= {0, 1}
