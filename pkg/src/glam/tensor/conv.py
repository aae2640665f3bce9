"""2-D convolution and transposed convolution (NCHW, square kernels, no dilation/groups)."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ShapeError, Tensor, _prep, record


def _out_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def im2col(x: np.ndarray, k: int, s: int, p: int) -> tuple[np.ndarray, int, int]:
    """Rows are output positions ``(n, i, j)``; columns are ``(c, ki, kj)``."""
    N, C, H, W = x.shape
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    Ho, Wo = _out_size(H, k, s, p), _out_size(W, k, s, p)
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :Ho, :Wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * k * k)
    return cols, Ho, Wo


def col2im(cols: np.ndarray, shape: tuple[int, int, int, int], k: int, s: int, p: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back to an image of ``shape``."""
    N, C, H, W = shape
    Ho, Wo = _out_size(H, k, s, p), _out_size(W, k, s, p)
    c6 = cols.reshape(N, Ho, Wo, C, k, k).transpose(0, 3, 4, 5, 1, 2)
    xp = np.zeros((N, C, H + 2 * p, W + 2 * p), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += c6[:, :, i, j]
    if p:
        xp = xp[:, :, p:p + H, p:p + W]
    return xp


def conv2d(x, w, b=None, stride: int = 2, padding: int = 1) -> Tensor:
    """``x (N, C, H, W)``, ``w (O, C, k, k)``, ``b (O,)``."""
    ins = (x, w) if b is None else (x, w, b)
    ts = _prep("conv2d", *ins)
    x, w = ts[0], ts[1]
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    N, C, H, W = x.shape
    O, _, k, _ = w.shape
    cols, Ho, Wo = im2col(x.data, k, stride, padding)
    w2 = w.data.reshape(O, -1)
    out = (cols @ w2.T).reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + ts[2].data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bwd(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gx = col2im(g2 @ w2, x.shape, k, stride, padding) if x.requires_grad else None
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        res = [gx, gw]
        if b is not None:
            res.append(g.sum(axis=(0, 2, 3)))
        return tuple(res)

    return record("conv2d", out, ts, bwd)


def conv_transpose2d(x, w, b=None, stride: int = 2, padding: int = 1) -> Tensor:
    """``x (N, Ci, H, W)``, ``w (Ci, Co, k, k)``; output side ``(H-1)*stride - 2*padding + k``."""
    ins = (x, w) if b is None else (x, w, b)
    ts = _prep("conv_transpose2d", *ins)
    x, w = ts[0], ts[1]
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv_transpose2d: input {x.shape} incompatible with weight {w.shape}")
    N, Ci, H, W = x.shape
    _, Co, k, _ = w.shape
    Ho = (H - 1) * stride - 2 * padding + k
    Wo = (W - 1) * stride - 2 * padding + k
    x2 = x.data.transpose(0, 2, 3, 1).reshape(-1, Ci)
    w2 = w.data.reshape(Ci, -1)
    out = col2im(x2 @ w2, (N, Co, Ho, Wo), k, stride, padding)
    if b is not None:
        out = out + ts[2].data[None, :, None, None]

    def bwd(g):
        gcols, _, _ = im2col(g, k, stride, padding)
        gx = (gcols @ w2.T).reshape(N, H, W, Ci).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = (x2.T @ gcols).reshape(w.shape) if w.requires_grad else None
        res = [gx, gw]
        if b is not None:
            res.append(g.sum(axis=(0, 2, 3)))
        return tuple(res)

    return record("conv_transpose2d", out, ts, bwd)
