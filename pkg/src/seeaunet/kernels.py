"""Convolution kernels: im2col/col2im and a blocked matrix multiply.

The forward matmul is a numba kernel that accumulates every output element in a
fixed order (``k = 0 .. K-1``, then the bias) and never reassociates. Work is
split over blocks of output rows, so the result does not depend on thread count
and is bitwise identical to a sequential sliding-window sum. The backward pass
uses BLAS, which is deterministic for a fixed shape and thread count.
"""
from __future__ import annotations

import math
import os

# the TBB layer shipped with some numba wheels is too old and warns on import
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

import numba  # noqa: E402
import numpy as np  # noqa: E402

from .errors import ShapeError  # noqa: E402

ROW_BLOCK = 64


@numba.njit(parallel=True, nogil=True, cache=True)
def _gemm_bias(a, b, bias, out):  # pragma: no cover - compiled
    m, k_dim = a.shape
    n = b.shape[1]
    n_blocks = (m + ROW_BLOCK - 1) // ROW_BLOCK
    for blk in numba.prange(n_blocks):
        i0 = blk * ROW_BLOCK
        i1 = min(i0 + ROW_BLOCK, m)
        acc = np.empty((4, n), out.dtype)
        i = i0
        while i + 4 <= i1:
            acc[:] = 0
            for k in range(k_dim):
                a0 = a[i, k]
                a1 = a[i + 1, k]
                a2 = a[i + 2, k]
                a3 = a[i + 3, k]
                for j in range(n):
                    bkj = b[k, j]
                    acc[0, j] += a0 * bkj
                    acc[1, j] += a1 * bkj
                    acc[2, j] += a2 * bkj
                    acc[3, j] += a3 * bkj
            for r in range(4):
                for j in range(n):
                    out[i + r, j] = acc[r, j] + bias[j]
            i += 4
        while i < i1:
            for j in range(n):
                acc[0, j] = 0
            for k in range(k_dim):
                aik = a[i, k]
                for j in range(n):
                    acc[0, j] += aik * b[k, j]
            for j in range(n):
                out[i, j] = acc[0, j] + bias[j]
            i += 1
    return out


def blocked_matmul(a: np.ndarray, b: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """``a @ b + bias`` with sequential accumulation over the inner dimension."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    dtype = np.result_type(a.dtype, b.dtype)
    a = np.ascontiguousarray(a, dtype=dtype)
    b = np.ascontiguousarray(b, dtype=dtype)
    if bias is None:
        bias = np.zeros(b.shape[1], dtype)
    bias = np.ascontiguousarray(bias, dtype=dtype)
    out = np.empty((a.shape[0], b.shape[1]), dtype)
    return _gemm_bias(a, b, bias, out)


def set_num_threads(n: int | None = None) -> int:
    """Cap kernel and BLAS parallelism; defaults to ``$SEEA_THREADS``."""
    if n is None:
        env = os.environ.get("SEEA_THREADS")
        if not env:
            return numba.get_num_threads()
        n = int(env)
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(n)
    except ImportError:  # pragma: no cover
        pass
    return n


def conv_geometry(h: int, w: int, kh: int, kw: int, stride: int, padding: str):
    """Output size and (top, bottom, left, right) zero padding.

    ``same`` pads so the output is ``ceil(size / stride)``, with any odd
    leftover going to the bottom/right edge.
    """
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if padding == "same":
        ho, wo = math.ceil(h / stride), math.ceil(w / stride)
        ph = max((ho - 1) * stride + kh - h, 0)
        pw = max((wo - 1) * stride + kw - w, 0)
        pads = (ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)
    elif padding == "valid":
        if kh > h or kw > w:
            raise ShapeError(f"kernel {kh}x{kw} larger than input {h}x{w} with valid padding")
        ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
        pads = (0, 0, 0, 0)
    else:
        raise ShapeError(f"unknown padding {padding!r}")
    if kh > h + pads[0] + pads[1] or kw > w + pads[2] + pads[3]:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input")
    return ho, wo, pads


@numba.njit(parallel=True, nogil=True, cache=True)
def _im2col(xp, kh, kw, stride, ho, wo, cols):  # pragma: no cover - compiled
    n, c = xp.shape[0], xp.shape[1]
    for b in numba.prange(n):
        for oy in range(ho):
            for ox in range(wo):
                row = (b * ho + oy) * wo + ox
                col = 0
                for ci in range(c):
                    for ky in range(kh):
                        for kx in range(kw):
                            cols[row, col] = xp[b, ci, oy * stride + ky, ox * stride + kx]
                            col += 1
    return cols


@numba.njit(parallel=True, nogil=True, cache=True)
def _col2im(dcols_t, kh, kw, stride, ho, wo, dx):  # pragma: no cover - compiled
    n, c = dx.shape[0], dx.shape[1]
    for b in numba.prange(n):
        for ci in range(c):
            for ky in range(kh):
                for kx in range(kw):
                    k = (ci * kh + ky) * kw + kx
                    for oy in range(ho):
                        base = (b * ho + oy) * wo
                        y = oy * stride + ky
                        for ox in range(wo):
                            dx[b, ci, y, ox * stride + kx] += dcols_t[k, base + ox]
    return dx


def _pad(x, pads):
    top, bottom, left, right = pads
    if any(pads):
        return np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))
    return np.ascontiguousarray(x)


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pads) -> tuple[np.ndarray, int, int]:
    """Unfold ``x[N,C,H,W]`` into rows of shape ``(N*Ho*Wo, C*kh*kw)``.

    Column order is ``(c, ky, kx)`` row-major, matching ``weight.reshape(Cout, -1)``.
    """
    xp = _pad(x, pads)
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if kh == 1 and kw == 1 and stride == 1:
        return np.ascontiguousarray(xp.transpose(0, 2, 3, 1).reshape(n * ho * wo, c)), ho, wo
    cols = np.empty((n * ho * wo, c * kh * kw), xp.dtype)
    return _im2col(xp, kh, kw, stride, ho, wo, cols), ho, wo


def col2im(dcols_t: np.ndarray, x_shape, kh: int, kw: int, stride: int, pads, ho: int, wo: int) -> np.ndarray:
    """Scatter-add column gradients back onto the (unpadded) input grid.

    ``dcols_t`` is the transposed column gradient, shape ``(C*kh*kw, N*Ho*Wo)``.
    """
    n, c, h, w = x_shape
    top, bottom, left, right = pads
    if kh == 1 and kw == 1 and stride == 1 and not any(pads):
        return np.ascontiguousarray(dcols_t.reshape(c, n, ho, wo).transpose(1, 0, 2, 3))
    dx = np.zeros((n, c, h + top + bottom, w + left + right), dcols_t.dtype)
    _col2im(np.ascontiguousarray(dcols_t), kh, kw, stride, ho, wo, dx)
    return dx[:, :, top:top + h, left:left + w]
