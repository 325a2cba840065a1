"""Differentiable primitive operations on 4-D ``(N, C, H, W)`` activations.

Every function takes and returns :class:`~seeaunet.autodiff.Tensor` objects and
registers a backward rule through :func:`~seeaunet.autodiff.make_node`.
"""
from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels
from .autodiff import Tensor, as_tensor, make_node
from .errors import ShapeError, StateError

# Set by kink_monitor(); collects the smallest distance of any relu input from 0
# and of any maxpool window's winner from its runner-up.
_kinks: list | None = None


@contextlib.contextmanager
def kink_monitor():
    """Record how close relu/maxpool inputs come to their non-differentiable points."""
    global _kinks
    previous = _kinks
    record: list = []
    _kinks = record
    try:
        yield record
    finally:
        _kinks = previous


def _note_kink(kind: str, distance: float) -> None:
    if _kinks is not None:
        _kinks.append((kind, float(distance)))


def _require_4d(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} expects a 4-D (N, C, H, W) tensor, got shape {x.shape}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise ---------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(out, (a, b), "add", backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(out, (a, b), "sub", backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_node(out, (a, b), "mul", backward)


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each channel of ``x[N,C,H,W]`` by ``s[N,C,1,1]``."""
    _require_4d(x, "scale_channels")
    if s.shape != (x.shape[0], x.shape[1], 1, 1):
        raise ShapeError(f"scale_channels: scales {s.shape} do not match input {x.shape}")
    out = x.data * s.data

    def backward(g):
        return g * s.data, (g * x.data).sum(axis=(2, 3), keepdims=True)

    return make_node(out, (x, s), "scale_channels", backward)


def relu(x: Tensor) -> Tensor:
    if _kinks is not None and x.size:
        _note_kink("relu", np.abs(x.data).min())
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def backward(g):
        # subgradient 0 at exactly 0
        return (g * mask,)

    return make_node(out, (x,), "relu", backward)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    # keep the open interval (0, 1) once |v| exceeds what the dtype can resolve
    lo, hi = np.finfo(v.dtype).tiny, np.nextafter(v.dtype.type(1), v.dtype.type(0))
    return np.clip(out, lo, hi, out=out)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def backward(g):
        return (g * s * (1 - s),)

    return make_node(s, (x,), "sigmoid", backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return make_node(out, (x,), "reshape", backward)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype).reshape(1)

    def backward(g):
        return (np.full(x.shape, g.reshape(-1)[0], dtype=x.dtype),)

    return make_node(out, (x,), "sum", backward)


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.data.mean(), dtype=x.dtype).reshape(1)

    def backward(g):
        return (np.full(x.shape, g.reshape(-1)[0] / n, dtype=x.dtype),)

    return make_node(out, (x,), "mean", backward)


# -- layers --------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation via im2col and the blocked matmul kernel.

    ``weight`` is ``[Cout, Cin, kh, kw]``; ``same`` padding follows the
    ``ceil(size / stride)`` convention.
    """
    _require_4d(x, "conv2d")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be [Cout, Cin, kh, kw], got {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias {bias.shape} does not match {cout} output channels")
    ho, wo, pads = kernels.conv_geometry(h, w, kh, kw, stride, padding)
    cols, _, _ = kernels.im2col(x.data, kh, kw, stride, pads)
    wmat = weight.data.reshape(cout, -1).T
    flat = kernels.blocked_matmul(cols, wmat, None if bias is None else bias.data)
    out = np.ascontiguousarray(flat.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        dw = (gmat.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols_t = wmat @ gmat.T
            dx = kernels.col2im(dcols_t, x.shape, kh, kw, stride, pads, ho, wo)
        grads = [dx, dw]
        if bias is not None:
            grads.append(gmat.sum(axis=0))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, inputs, "conv2d", backward)


def maxpool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    """Max over ``k x k`` windows. Trailing rows/cols that do not fill a window are dropped."""
    _require_4d(x, "maxpool2d")
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ShapeError(f"maxpool2d window {k} larger than input {h}x{w}")
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, k * k)
    idx = flat.argmax(axis=-1)  # first occurrence on ties
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    if _kinks is not None and k * k > 1 and out.size:
        top2 = np.sort(flat, axis=-1)[..., -2:]
        _note_kink("maxpool", (top2[..., 1] - top2[..., 0]).min())
    out = np.ascontiguousarray(out)

    def backward(g):
        dx = np.zeros(x.shape, g.dtype)
        ni, ci, oy, ox = np.indices((n, c, ho, wo), sparse=True)
        rows = oy * stride + idx // k
        cols_ = ox * stride + idx % k
        if stride >= k:
            dx[ni, ci, rows, cols_] = g
        else:
            np.add.at(dx, (ni, ci, rows, cols_), g)
        return (dx,)

    return make_node(out, (x,), "maxpool2d", backward)


def global_avg_pool(x: Tensor) -> Tensor:
    _require_4d(x, "global_avg_pool")
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError(f"global_avg_pool needs non-empty spatial dims, got {x.shape}")
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def backward(g):
        return (np.broadcast_to(g / (h * w), x.shape).astype(g.dtype),)

    return make_node(out, (x,), "global_avg_pool", backward)


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x[N,F] @ weight[F,G] + bias[G]``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"dense: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data

    def backward(g):
        grads = [g @ weight.data.T, x.data.T @ g]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, inputs, "dense", backward)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor | None,
    running_var: Tensor | None,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation.

    In train mode the batch statistics over ``(N, H, W)`` normalise the input and
    the running statistics are updated in place as
    ``running = (1 - momentum) * running + momentum * batch`` (unbiased variance).
    In inference mode the running statistics are used and must be initialised.
    """
    _require_4d(x, "batchnorm2d")
    c = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta)):
        if t.shape != (c,):
            raise ShapeError(f"batchnorm2d {name} has shape {t.shape}, expected ({c},)")
    shape = (1, c, 1, 1)
    g4 = gamma.data.reshape(shape)
    if train:
        count = x.size // c
        mean = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mean.reshape(shape)
        var = (centered * centered).mean(axis=(0, 2, 3))
        if running_mean is not None and running_var is not None:
            unbiased = var * (count / (count - 1)) if count > 1 else var
            running_mean.data[...] = (1 - momentum) * running_mean.data + momentum * mean
            running_var.data[...] = (1 - momentum) * running_var.data + momentum * unbiased
    else:
        if running_mean is None or running_var is None:
            raise StateError("batchnorm2d in inference mode needs running statistics")
        if not (np.all(np.isfinite(running_mean.data)) and np.all(np.isfinite(running_var.data))):
            raise StateError("batchnorm2d running statistics are uninitialised (non-finite)")
        mean, var = running_mean.data, running_var.data
        centered = x.data - mean.reshape(shape)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype).reshape(shape)
    xhat = centered * inv_std
    out = xhat * g4 + beta.data.reshape(shape)

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * g4
        if train:
            m = x.size // c
            dx = inv_std / m * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return make_node(out, (x, gamma, beta), "batchnorm2d", backward)


def upsample2d(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling by an integer factor."""
    _require_4d(x, "upsample2d")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return make_node(out, (x,), "upsample2d", backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _require_4d(a, "concat_channels")
    _require_4d(b, "concat_channels")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"concat_channels: cannot join {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward(g):
        return g[:, :ca], g[:, ca:]

    return make_node(out, (a, b), "concat_channels", backward)
