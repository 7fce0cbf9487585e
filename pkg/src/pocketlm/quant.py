"""Block-wise weight quantization codecs and size arithmetic.

Three packed formats plus the two float passthroughs:

  BQ8   block = 32 weights:  fp16 scale d + 32 int8 quants            (34 B, 8.5 bpw)
        reconstruct  x = d * q
  BQ4   block = 32 weights:  fp16 scale d + 16 B packed nibbles       (18 B, 4.5 bpw)
        low nibble = even index, reconstruct  x = d * (n - 8)
  BQ5S  superblock = 256 weights in 8 sub-blocks of 32:
        fp16 d + fp16 dmin
        + 12 B packed 6-bit sub-scales then sub-mins (little-endian bitstream)
        + 160 B packed 5-bit quants (little-endian bits, 8 quants per 5 bytes)
        = 176 B, 5.5 bpw; reconstruct  x = d*s[j]*q - dmin*m[j]  for sub-block j

All scales are stored as IEEE half precision; quantization divides by the
*stored* (half-rounded) scale so reconstruction error is bounded by the
stored step size. Rounding is round-half-to-even throughout.
"""

from __future__ import annotations

import enum
import math
from fractions import Fraction

import numpy as np


class QuantError(Exception):
    """Base error for codec misuse."""


class BadLength(QuantError):
    """Input length is not a multiple of the format's block length."""


class NonFinite(QuantError):
    """Input contains NaN or Inf; refusing to encode corrupted weights."""


class DType(enum.IntEnum):
    """Tensor storage formats. Values are the on-disk container codes."""

    F32 = 0
    F16 = 1
    BQ8 = 2
    BQ4 = 3
    BQ5S = 4


# (block length in weights, encoded bytes per block)
BLOCK_SIZES: dict[DType, tuple[int, int]] = {
    DType.F32: (1, 4),
    DType.F16: (1, 2),
    DType.BQ8: (32, 34),
    DType.BQ4: (32, 18),
    DType.BQ5S: (256, 176),
}

QUANTIZED_DTYPES = (DType.BQ8, DType.BQ4, DType.BQ5S)


def block_length(fmt: DType) -> int:
    return BLOCK_SIZES[fmt][0]


def bits_per_weight(fmt: DType) -> Fraction:
    """Average stored bits per weight, scales included, as an exact rational."""
    block, nbytes = BLOCK_SIZES[fmt]
    return Fraction(nbytes * 8, block)


def encoded_nbytes(n_elements: int, fmt: DType) -> int:
    """Encoded byte size of ``n_elements`` weights; raises if not a block multiple."""
    block, nbytes = BLOCK_SIZES[fmt]
    if n_elements % block != 0:
        raise BadLength(
            f"{n_elements} elements is not a multiple of {fmt.name} block length {block}"
        )
    return (n_elements // block) * nbytes


def estimate_model_bytes(n_params: int | float, fmt: DType, overhead_ratio: float = 1.0) -> int:
    """Estimated bytes to hold ``n_params`` weights stored as ``fmt``.

    ``overhead_ratio`` (>= 1) absorbs the tensors a quantized model keeps at
    higher precision (norms, sometimes embeddings). The arithmetic is exact:
    ceil(n_params * bpw/8 * overhead).
    """
    if n_params <= 0:
        raise ValueError("n_params must be positive")
    if overhead_ratio < 1.0:
        raise ValueError("overhead_ratio must be >= 1")
    exact = Fraction(n_params) * bits_per_weight(fmt) / 8 * Fraction(overhead_ratio)
    return math.ceil(exact)


# ---------------------------------------------------------------------------
# bit packing helpers (little-endian bitstreams)
# ---------------------------------------------------------------------------


def pack_bits(values: np.ndarray, width: int) -> np.ndarray:
    """Pack unsigned ints of ``width`` bits into a little-endian bitstream.

    ``values`` has shape (..., group) where group*width is a whole number of
    bytes; returns uint8 of shape (..., group*width//8).
    """
    group = values.shape[-1]
    nbytes = group * width // 8
    shifts = (np.arange(group, dtype=np.uint64) * width).reshape((1,) * (values.ndim - 1) + (group,))
    acc = (values.astype(np.uint64) << shifts).sum(axis=-1, dtype=np.uint64)
    byte_shifts = (np.arange(nbytes, dtype=np.uint64) * 8).reshape((1,) * (values.ndim - 1) + (nbytes,))
    return ((acc[..., None] >> byte_shifts) & np.uint64(0xFF)).astype(np.uint8)


def unpack_bits(packed: np.ndarray, width: int, group: int) -> np.ndarray:
    """Inverse of :func:`pack_bits`; returns uint8 values in [0, 2**width)."""
    nbytes = packed.shape[-1]
    byte_shifts = (np.arange(nbytes, dtype=np.uint64) * 8).reshape((1,) * (packed.ndim - 1) + (nbytes,))
    acc = (packed.astype(np.uint64) << byte_shifts).sum(axis=-1, dtype=np.uint64)
    shifts = (np.arange(group, dtype=np.uint64) * width).reshape((1,) * (packed.ndim - 1) + (group,))
    mask = np.uint64((1 << width) - 1)
    return ((acc[..., None] >> shifts) & mask).astype(np.uint8)


def _round_div(x: np.ndarray, d: np.ndarray) -> np.ndarray:
    """round-half-even(x / d) with d == 0 mapping to 0."""
    out = np.zeros_like(x, dtype=np.float32)
    np.divide(x, d, out=out, where=d != 0)
    return np.round(out)


def _check_input(x: np.ndarray, fmt: DType) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float32)
    if x.ndim != 1:
        x = x.reshape(-1)
    block = block_length(fmt)
    if x.size == 0 or x.size % block != 0:
        raise BadLength(
            f"input length {x.size} is not a positive multiple of {fmt.name} block length {block}"
        )
    if not np.isfinite(x).all():
        raise NonFinite("input contains NaN or Inf")
    return x


# ---------------------------------------------------------------------------
# BQ8: fp16 scale + int8 quants
# ---------------------------------------------------------------------------


def _quantize_bq8(x: np.ndarray) -> bytes:
    blocks = x.reshape(-1, 32)
    amax = np.abs(blocks).max(axis=1)
    d16 = (amax / 127.0).astype(np.float16)
    dw = d16.astype(np.float32)[:, None]
    q = np.clip(_round_div(blocks, dw), -127, 127).astype(np.int8)
    out = np.empty((blocks.shape[0], 34), dtype=np.uint8)
    out[:, 0:2] = d16[:, None].view(np.uint8)
    out[:, 2:34] = q.view(np.uint8)
    return out.tobytes()


def _dequantize_bq8(raw: np.ndarray) -> np.ndarray:
    blocks = raw.reshape(-1, 34)
    d = blocks[:, 0:2].copy().view(np.float16).astype(np.float32).reshape(-1, 1)
    q = blocks[:, 2:34].view(np.int8).astype(np.float32)
    return (d * q).reshape(-1)


# ---------------------------------------------------------------------------
# BQ4: fp16 scale + packed nibbles, offset-8
# ---------------------------------------------------------------------------


def _quantize_bq4(x: np.ndarray) -> bytes:
    blocks = x.reshape(-1, 32)
    # signed element of max magnitude maps to nibble 0 (d = m / -8)
    idx = np.abs(blocks).argmax(axis=1)
    m = blocks[np.arange(blocks.shape[0]), idx]
    d16 = (m / -8.0 + 0.0).astype(np.float16)  # +0.0 canonicalizes -0.0
    dw = d16.astype(np.float32)[:, None]
    n = np.where(dw != 0, np.clip(_round_div(blocks, dw) + 8, 0, 15), 0).astype(np.uint8)
    packed = n[:, 0::2] | (n[:, 1::2] << 4)  # low nibble = even index
    out = np.empty((blocks.shape[0], 18), dtype=np.uint8)
    out[:, 0:2] = d16[:, None].view(np.uint8)
    out[:, 2:18] = packed
    return out.tobytes()


def _dequantize_bq4(raw: np.ndarray) -> np.ndarray:
    blocks = raw.reshape(-1, 18)
    d = blocks[:, 0:2].copy().view(np.float16).astype(np.float32).reshape(-1, 1)
    packed = blocks[:, 2:18]
    n = np.empty((blocks.shape[0], 32), dtype=np.uint8)
    n[:, 0::2] = packed & 0x0F
    n[:, 1::2] = packed >> 4
    return (d * (n.astype(np.float32) - 8.0)).reshape(-1)


# ---------------------------------------------------------------------------
# BQ5S: two-level superblock, 8 sub-blocks of 32 with 6-bit sub scales/mins
# ---------------------------------------------------------------------------


def _bq5s_fit(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Affine per-sub-block fit. Returns (d16, dmin16, scales, mins, q)."""
    sub = x.reshape(-1, 8, 32)
    mn = sub.min(axis=2)
    mx = sub.max(axis=2)
    m_raw = np.clip(-mn, 0.0, None) + 0.0  # +0.0 canonicalizes -0.0
    s_raw = (mx - mn) / 31.0
    d16 = (s_raw.max(axis=1) / 63.0).astype(np.float16)
    dmin16 = (m_raw.max(axis=1) / 63.0).astype(np.float16)
    dw = d16.astype(np.float32)[:, None]
    dminw = dmin16.astype(np.float32)[:, None]
    scales = np.clip(_round_div(s_raw, dw), 0, 63).astype(np.uint8)
    mins = np.clip(_round_div(m_raw, dminw), 0, 63).astype(np.uint8)
    step = dw[:, :, None] * scales.astype(np.float32)[:, :, None]  # (n, 8, 1)
    shifted = sub + (dminw[:, :, None] * mins.astype(np.float32)[:, :, None])
    q = np.clip(_round_div(shifted, step), 0, 31).astype(np.uint8)
    return d16, dmin16, scales, mins, q


def _quantize_bq5s(x: np.ndarray) -> bytes:
    d16, dmin16, scales, mins, q = _bq5s_fit(x)
    n = d16.shape[0]
    out = np.empty((n, 176), dtype=np.uint8)
    out[:, 0:2] = d16[:, None].view(np.uint8)
    out[:, 2:4] = dmin16[:, None].view(np.uint8)
    out[:, 4:10] = pack_bits(scales, 6)
    out[:, 10:16] = pack_bits(mins, 6)
    out[:, 16:176] = pack_bits(q.reshape(n, 32, 8), 5).reshape(n, 160)
    return out.tobytes()


def _dequantize_bq5s(raw: np.ndarray) -> np.ndarray:
    blocks = raw.reshape(-1, 176)
    n = blocks.shape[0]
    d = blocks[:, 0:2].copy().view(np.float16).astype(np.float32).reshape(-1)
    dmin = blocks[:, 2:4].copy().view(np.float16).astype(np.float32).reshape(-1)
    scales = unpack_bits(blocks[:, 4:10], 6, 8).astype(np.float32)
    mins = unpack_bits(blocks[:, 10:16], 6, 8).astype(np.float32)
    q = unpack_bits(blocks[:, 16:176].reshape(n, 32, 5), 5, 8).reshape(n, 8, 32)
    val = (d[:, None] * scales)[:, :, None] * q.astype(np.float32)
    val -= ((dmin[:, None] * mins)[:, :, None])
    return val.reshape(-1)


# ---------------------------------------------------------------------------
# public codec surface
# ---------------------------------------------------------------------------


def quantize(x: np.ndarray, fmt: DType) -> bytes:
    """Encode a float32 array into packed blocks of ``fmt``.

    Pure and deterministic: identical input bytes produce identical output
    bytes. Raises :class:`BadLength` if the length is not a block multiple
    and :class:`NonFinite` on NaN/Inf input.
    """
    x = _check_input(x, fmt)
    if fmt == DType.F32:
        return x.tobytes()
    if fmt == DType.F16:
        return x.astype(np.float16).tobytes()
    if fmt == DType.BQ8:
        return _quantize_bq8(x)
    if fmt == DType.BQ4:
        return _quantize_bq4(x)
    if fmt == DType.BQ5S:
        return _quantize_bq5s(x)
    raise QuantError(f"unknown format {fmt!r}")


def dequantize(data: bytes | memoryview | np.ndarray, fmt: DType) -> np.ndarray:
    """Decode packed blocks back to float32 via the format's reconstruction rule."""
    raw = np.frombuffer(data, dtype=np.uint8) if not isinstance(data, np.ndarray) else data
    _, block_bytes = BLOCK_SIZES[fmt]
    if raw.size == 0 or raw.size % block_bytes != 0:
        raise BadLength(
            f"encoded length {raw.size} is not a positive multiple of {fmt.name} block size {block_bytes} B"
        )
    if fmt == DType.F32:
        return np.frombuffer(raw.tobytes(), dtype=np.float32).copy()
    if fmt == DType.F16:
        return np.frombuffer(raw.tobytes(), dtype=np.float16).astype(np.float32)
    if fmt == DType.BQ8:
        return _dequantize_bq8(raw)
    if fmt == DType.BQ4:
        return _dequantize_bq4(raw)
    if fmt == DType.BQ5S:
        return _dequantize_bq5s(raw)
    raise QuantError(f"unknown format {fmt!r}")
