"""Numeric primitives of the decoder forward pass.

The performance core is `matvec` over quantized weights: rather than
materializing a dequantized float matrix, each weight row keeps its integer
quants and per-block scales, and the kernel accumulates per-block partial
dot products in float32 before the scale multiply. Row chunks may be
dispatched to a thread pool; rows are independent, so the result is
bitwise identical for any thread count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .quant import DType, unpack_bits, dequantize, encoded_nbytes


class KernelError(Exception):
    pass


class ShapeMismatch(KernelError):
    pass


class NonFinite(KernelError):
    pass


class OddHeadDim(KernelError):
    pass


# ---------------------------------------------------------------------------
# threading: row-parallel only; size threshold keeps tiny models on one core
# ---------------------------------------------------------------------------

_n_threads = 1
_pool: ThreadPoolExecutor | None = None
_PARALLEL_MIN_ROWS = 256


def set_threads(n: int) -> None:
    """Set the worker count for row-parallel matvec (>= 1)."""
    global _n_threads, _pool
    if n < 1:
        raise ValueError("thread count must be >= 1")
    if n != _n_threads:
        if _pool is not None:
            _pool.shutdown(wait=False)
            _pool = None
        _n_threads = n
        if n > 1:
            _pool = ThreadPoolExecutor(max_workers=n)


def get_threads() -> int:
    return _n_threads


@dataclass
class TensorView:
    """A weight tensor: dtype + dims over raw encoded bytes.

    Decoding the packed representation into integer quants plus scales is
    lossless and cached on first use; the view itself stays immutable.
    """

    dtype: DType
    dims: tuple[int, ...]
    data: memoryview | bytes
    _decoded: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        n = 1
        for d in self.dims:
            n *= d
        expected = encoded_nbytes(n, self.dtype)
        if len(self.data) != expected:
            raise ShapeMismatch(
                f"tensor dims {self.dims} ({self.dtype.name}) need {expected} bytes, got {len(self.data)}"
            )

    @property
    def n_elements(self) -> int:
        n = 1
        for d in self.dims:
            n *= d
        return n

    def to_f32(self) -> np.ndarray:
        """Full dequantization to a float32 array shaped like `dims`."""
        return dequantize(self.data, self.dtype).reshape(self.dims)

    def row_f32(self, i: int) -> np.ndarray:
        """Dequantize a single outermost row (2-D views only)."""
        if len(self.dims) != 2:
            raise ShapeMismatch("row_f32 requires a 2-D view")
        row_bytes = encoded_nbytes(self.dims[1], self.dtype)
        raw = memoryview(self.data)[i * row_bytes : (i + 1) * row_bytes]
        return dequantize(raw, self.dtype)


def _decode(view: TensorView):
    """Decoded (scales, quants, ...) pulled out of the packed bytes once."""
    if view._decoded is not None:
        return view._decoded
    if len(view.dims) != 2:
        raise ShapeMismatch(f"matvec weight must be 2-D, got dims {view.dims}")
    rows, cols = view.dims
    raw = np.frombuffer(view.data, dtype=np.uint8)
    if view.dtype == DType.F32:
        dec = np.frombuffer(view.data, dtype=np.float32).reshape(rows, cols)
    elif view.dtype == DType.F16:
        dec = np.frombuffer(view.data, dtype=np.float16).astype(np.float32).reshape(rows, cols)
    elif view.dtype == DType.BQ8:
        blocks = raw.reshape(rows, cols // 32, 34)
        d = blocks[:, :, 0:2].copy().view(np.float16).astype(np.float32).reshape(rows, -1)
        q = blocks[:, :, 2:34].view(np.int8).astype(np.float32)
        dec = (d, q)
    elif view.dtype == DType.BQ4:
        blocks = raw.reshape(rows, cols // 32, 18)
        d = blocks[:, :, 0:2].copy().view(np.float16).astype(np.float32).reshape(rows, -1)
        packed = blocks[:, :, 2:18]
        n = np.empty((rows, cols // 32, 32), dtype=np.uint8)
        n[:, :, 0::2] = packed & 0x0F
        n[:, :, 1::2] = packed >> 4
        dec = (d, n.astype(np.float32) - 8.0)
    elif view.dtype == DType.BQ5S:
        nb = cols // 256
        blocks = raw.reshape(rows, nb, 176)
        d = blocks[:, :, 0:2].copy().view(np.float16).astype(np.float32).reshape(rows, nb)
        dmin = blocks[:, :, 2:4].copy().view(np.float16).astype(np.float32).reshape(rows, nb)
        scales = unpack_bits(blocks[:, :, 4:10], 6, 8).astype(np.float32)
        mins = unpack_bits(blocks[:, :, 10:16], 6, 8).astype(np.float32)
        q = unpack_bits(blocks[:, :, 16:176].reshape(rows, nb, 32, 5), 5, 8)
        q = q.reshape(rows, nb, 8, 32).astype(np.float32)
        eff_scale = d[:, :, None] * scales  # (rows, nb, 8)
        eff_min = dmin[:, :, None] * mins
        dec = (eff_scale, eff_min, q)
    else:
        raise KernelError(f"unsupported weight dtype {view.dtype!r}")
    view._decoded = dec
    return dec


def _matvec_rows(view: TensorView, x: np.ndarray, r0: int, r1: int) -> np.ndarray:
    cols = view.dims[1]
    dec = _decode(view)
    if view.dtype in (DType.F32, DType.F16):
        return dec[r0:r1] @ x
    if view.dtype in (DType.BQ8, DType.BQ4):
        d, q = dec
        xb = x.reshape(-1, 32)
        partial = np.einsum("rbk,bk->rb", q[r0:r1], xb, dtype=np.float32)
        return np.einsum("rb,rb->r", partial, d[r0:r1], dtype=np.float32)
    # BQ5S: y = sum_j d*s_j*(q_j . x_j) - sum_j dmin*m_j*sum(x_j)
    eff_scale, eff_min, q = dec
    xg = x.reshape(-1, 8, 32)
    dots = np.einsum("rjks,jks->rjk", q[r0:r1], xg, dtype=np.float32)
    xsum = xg.sum(axis=2, dtype=np.float32)
    y = np.einsum("rjk,rjk->r", dots, eff_scale[r0:r1], dtype=np.float32)
    y -= np.einsum("rjk,jk->r", eff_min[r0:r1], xsum, dtype=np.float32)
    return y


def matvec(view: TensorView, x: np.ndarray) -> np.ndarray:
    """y[r] = sum_c W[r, c] * x[c] with W dequantized on the fly per block."""
    if len(view.dims) != 2:
        raise ShapeMismatch(f"matvec weight must be 2-D, got dims {view.dims}")
    rows, cols = view.dims
    x = np.ascontiguousarray(x, dtype=np.float32)
    if x.shape != (cols,):
        raise ShapeMismatch(f"weight is {rows}x{cols}, input has shape {x.shape}")
    if _n_threads > 1 and rows >= _PARALLEL_MIN_ROWS and _pool is not None:
        chunk = (rows + _n_threads - 1) // _n_threads
        out = np.empty(rows, dtype=np.float32)
        bounds = [(i, min(i + chunk, rows)) for i in range(0, rows, chunk)]
        futures = [_pool.submit(_matvec_rows, view, x, r0, r1) for r0, r1 in bounds]
        for (r0, r1), fut in zip(bounds, futures):
            out[r0:r1] = fut.result()
        return out
    return _matvec_rows(view, x, 0, rows)


def rmsnorm(x: np.ndarray, w: np.ndarray, eps: float) -> np.ndarray:
    """y_i = w_i * x_i / sqrt(mean(x^2) + eps)"""
    if x.shape != w.shape:
        raise ShapeMismatch(f"rmsnorm shapes {x.shape} vs {w.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    ms = np.mean(np.square(x, dtype=np.float32), dtype=np.float32)
    return (w * x) / np.float32(math.sqrt(ms + eps))


def softmax_in_place(x: np.ndarray) -> np.ndarray:
    """Numerically stable softmax; mutates and returns x."""
    if not np.isfinite(x).all():
        raise NonFinite("softmax input must be finite")
    x -= x.max()
    np.exp(x, out=x)
    x /= x.sum(dtype=np.float32)
    return x


def rope(v: np.ndarray, pos: int, theta_base: float) -> np.ndarray:
    """Rotate interleaved pairs (v[2i], v[2i+1]) by pos * theta_base^(-2i/d)."""
    d = v.shape[-1]
    if d % 2:
        raise OddHeadDim(f"head dim {d} must be even")
    freqs = np.power(theta_base, -np.arange(0, d, 2, dtype=np.float64) / d)
    angles = pos * freqs
    cos = np.cos(angles).astype(np.float32)
    sin = np.sin(angles).astype(np.float32)
    out = np.empty_like(v, dtype=np.float32)
    even, odd = v[..., 0::2], v[..., 1::2]
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def silu(x: np.ndarray) -> np.ndarray:
    """x * sigmoid(x); exp overflow for very negative inputs resolves to 0."""
    with np.errstate(over="ignore"):
        return (x / (1.0 + np.exp(-x.astype(np.float32)))).astype(np.float32)
