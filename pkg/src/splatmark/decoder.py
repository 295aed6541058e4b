"""Frozen key-seeded linear message decoder.

The decoder average-pools its input (the level-2 Haar LL subband by default)
onto a G x G grid per channel and projects the flattened features onto
``n_bits`` orthonormal directions. The directions are also orthogonal to the
lowest ``reject`` x ``reject`` cosine modes of every channel. Natural image
content concentrates its energy there, so this fixed rejection stands in for
the data-driven whitening a trained decoder would use to remove message bias.
It also makes the logits exactly invariant to a global brightness offset.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ._io import atomic_write_text
from .errors import ValidationError
from .freq import dwt2

VALID_BITS = (32, 48, 64)
DEFAULT_GRID = 16
DEFAULT_REJECT = 4
DOMAINS = ("ll2", "pixel")


@dataclass(frozen=True)
class WatermarkKey:
    seed: int
    n_bits: int = 32

    def __post_init__(self):
        if isinstance(self.seed, bool) or int(self.seed) != self.seed:
            raise ValidationError("key seed must be an integer")
        if not 0 <= int(self.seed) < 2**64:
            raise ValidationError("key seed must fit in 64 bits")
        if self.n_bits not in VALID_BITS:
            raise ValidationError(f"n_bits must be one of {VALID_BITS}, got {self.n_bits}")

    @property
    def message(self) -> np.ndarray:
        rng = np.random.default_rng([int(self.seed), self.n_bits, 0])
        return rng.integers(0, 2, self.n_bits).astype(np.int8)


def _pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    edges = np.floor(np.arange(n_out + 1) * n_in / n_out).astype(int)
    m = np.zeros((n_out, n_in))
    for k in range(n_out):
        m[k, edges[k] : edges[k + 1]] = 1.0 / (edges[k + 1] - edges[k])
    return m


def lowpass_basis(grid: int, reject: int) -> np.ndarray:
    """Orthonormal rows spanning the lowest ``reject`` x ``reject`` DCT-II modes per channel."""
    x = np.arange(grid)
    cos = np.stack([np.cos(np.pi * (x + 0.5) * k / grid) for k in range(reject)])
    cos /= np.linalg.norm(cos, axis=1, keepdims=True)
    rows = []
    for a in range(reject):
        for b in range(reject):
            mode = np.outer(cos[a], cos[b]).reshape(-1)
            for ch in range(3):
                v = np.zeros((grid * grid, 3))
                v[:, ch] = mode
                rows.append(v.reshape(-1))
    return np.array(rows).reshape(-1, grid * grid * 3)


def gram_schmidt_rows(rows: np.ndarray, against: np.ndarray | None = None) -> np.ndarray:
    """Orthonormalize ``rows`` in order (modified Gram-Schmidt, two passes).

    ``against`` holds orthonormal rows every output row must also be orthogonal to.
    """
    basis = [] if against is None else [r for r in against]
    out = []
    for r in rows:
        v = np.array(r, dtype=np.float64)
        for _ in range(2):
            for b in basis:
                v -= (b @ v) * b
        norm = np.linalg.norm(v)
        if norm < 1e-10:
            raise ValidationError("rank deficit while orthonormalizing decoder rows")
        v /= norm
        basis.append(v)
        out.append(v)
    return np.array(out)


@dataclass(frozen=True, eq=False)
class FrozenDecoder:
    """Immutable decoder; arrays are read-only."""

    key: WatermarkKey
    input_shape: tuple[int, int]
    grid: int
    domain: str
    reject: int
    pool_rows: np.ndarray
    pool_cols: np.ndarray
    projection: np.ndarray
    bias: np.ndarray

    @property
    def n_bits(self) -> int:
        return self.key.n_bits

    @property
    def image_shape(self) -> tuple[int, int]:
        """Render resolution (H, W) the decoder expects."""
        h, w = self.input_shape
        return (4 * h, 4 * w) if self.domain == "ll2" else (h, w)

    def to_json(self) -> dict:
        return {
            "seed": int(self.key.seed),
            "n_bits": self.n_bits,
            "G": self.grid,
            "reject": self.reject,
            "ll2_shape" if self.domain == "ll2" else "input_shape": list(self.input_shape),
            "domain": self.domain,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "FrozenDecoder":
        try:
            domain = doc.get("domain", "ll2")
            shape = doc["ll2_shape"] if domain == "ll2" else doc["input_shape"]
            return build_decoder(WatermarkKey(int(doc["seed"]), int(doc["n_bits"])), tuple(shape),
                                 grid=int(doc["G"]), domain=domain,
                                 reject=int(doc.get("reject", DEFAULT_REJECT)))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"decoder JSON: missing or malformed field ({exc})") from exc


def build_decoder(key: WatermarkKey, ll2_shape: tuple[int, int], grid: int = DEFAULT_GRID,
                  domain: str = "ll2", reject: int = DEFAULT_REJECT) -> FrozenDecoder:
    """Construct the decoder for ``key`` and an input of spatial shape ``ll2_shape``.

    With ``domain="pixel"`` the input is the rendered image itself and
    ``ll2_shape`` is its (H, W); this exists for the pixel-domain ablation.
    """
    if domain not in DOMAINS:
        raise ValidationError(f"domain must be one of {DOMAINS}")
    h, w = (int(v) for v in ll2_shape)
    if grid < 1 or h < grid or w < grid:
        raise ValidationError(f"decoder input {h}x{w} is smaller than the {grid}x{grid} pooling grid")
    if not 1 <= reject <= grid:
        raise ValidationError("reject must lie in [1, grid]")
    n_feat = grid * grid * 3
    usable = n_feat - 3 * reject * reject
    if key.n_bits > usable:
        raise ValidationError(f"{key.n_bits} bits exceed the {usable} usable features of a {grid}x{grid} grid")
    rng = np.random.default_rng([int(key.seed), key.n_bits, 1])
    raw = rng.standard_normal((key.n_bits, n_feat))
    projection = gram_schmidt_rows(raw, against=lowpass_basis(grid, reject))
    bias = np.zeros(key.n_bits)
    pool_rows = _pool_matrix(h, grid)
    pool_cols = _pool_matrix(w, grid)
    for a in (projection, bias, pool_rows, pool_cols):
        a.setflags(write=False)
    return FrozenDecoder(key, (h, w), grid, domain, reject, pool_rows, pool_cols, projection, bias)


def _check_input(decoder: FrozenDecoder, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (*decoder.input_shape, 3):
        raise ValidationError(f"decoder expects input {(*decoder.input_shape, 3)}, got {x.shape}")
    return x


def decode(decoder: FrozenDecoder, ll2: np.ndarray) -> np.ndarray:
    """Message logits for one decoder input."""
    x = _check_input(decoder, ll2)
    pooled = np.einsum("gh,hwc,kw->gkc", decoder.pool_rows, x, decoder.pool_cols)
    return decoder.projection @ pooled.reshape(-1) + decoder.bias


def decode_backward(decoder: FrozenDecoder, dL_dlogits: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the decoder input given dL/dlogits (exact adjoint)."""
    g = np.asarray(dL_dlogits, dtype=np.float64).reshape(decoder.n_bits)
    g_pooled = (decoder.projection.T @ g).reshape(decoder.grid, decoder.grid, 3)
    return np.einsum("gh,gkc,kw->hwc", decoder.pool_rows, g_pooled, decoder.pool_cols)


def decoder_input(decoder: FrozenDecoder, image: np.ndarray) -> np.ndarray:
    """Map a rendered image to what :func:`decode` consumes."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape[:2] != decoder.image_shape:
        raise ValidationError(f"decoder expects a {decoder.image_shape} image, got {image.shape[:2]}")
    if decoder.domain == "ll2":
        return dwt2(image, 2).ll
    return image


def extract_bits(decoder: FrozenDecoder, image: np.ndarray) -> np.ndarray:
    """Decode the watermark bits (0/1 array) carried by ``image``."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] % 4 or image.shape[1] % 4:
        raise ValidationError("extract_bits needs an H x W x 3 image with H, W divisible by 4")
    logits = decode(decoder, decoder_input(decoder, image))
    return (logits > 0).astype(np.int8)


def save_decoder(decoder: FrozenDecoder, path) -> None:
    atomic_write_text(path, json.dumps(decoder.to_json(), indent=1) + "\n")


def load_decoder(path) -> FrozenDecoder:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    return FrozenDecoder.from_json(doc)
