"""Pure-numpy versions of the compiled loops in ``_ckernels.pyx``.

Layouts:

* ``im2col`` returns ``(C*kh*kw, N*Ho*Wo)`` with rows ordered ``(c, i, j)`` and
  columns ordered ``(n, oh, ow)``, so ``weight.reshape(O, -1) @ cols`` is a
  convolution.
* ``bilinear_forward`` returns ``(N, C, K, Ho, Wo)``; out-of-range neighbours
  read as zero.
"""
from __future__ import annotations

import numpy as np


def _out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    N, C, H, W = x.shape
    Ho, Wo = _out_size(H, kh, stride, pad), _out_size(W, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((C, kh, kw, N, Ho, Wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(C * kh * kw, N * Ho * Wo)


def col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    N, C, H, W = shape
    Ho, Wo = _out_size(H, kh, stride, pad), _out_size(W, kw, stride, pad)
    cols = cols.reshape(C, kh, kw, N, Ho, Wo)
    xp = np.zeros((N, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += cols[:, i, j].transpose(1, 0, 2, 3)
    if pad:
        return np.ascontiguousarray(xp[:, :, pad:pad + H, pad:pad + W])
    return xp


def _corners(px: np.ndarray, py: np.ndarray, H: int, W: int):
    live = (px > -1.0) & (py > -1.0) & (px < W) & (py < H)
    # dead sites are parked at the origin with all weights masked off
    X = np.where(live, px, 0.0)
    Y = np.where(live, py, 0.0)
    x0f, y0f = np.floor(X), np.floor(Y)
    fx, fy = X - x0f, Y - y0f
    x0, y0 = x0f.astype(np.int64), y0f.astype(np.int64)
    corners = []
    for dy, dx, w in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        yy, xx = y0 + dy, x0 + dx
        valid = live & (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
        flat = np.where(valid, yy * W + xx, 0)
        corners.append((dy, dx, valid, flat, w))
    return fx, fy, corners


def _gather(x: np.ndarray, flat: np.ndarray, valid: np.ndarray) -> np.ndarray:
    # x (N,C,H*W), flat/valid (N,K,Ho,Wo) -> (N,C,K,Ho,Wo)
    N, C, _ = x.shape
    idx = flat.reshape(N, 1, -1)
    vals = np.take_along_axis(x, np.broadcast_to(idx, (N, C, idx.shape[-1])), axis=2)
    vals = vals.reshape((N, C) + flat.shape[1:])
    return vals * valid[:, None]


def bilinear_forward(x: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    N, C, H, W = x.shape
    _, _, corners = _corners(px, py, H, W)
    xf = x.reshape(N, C, H * W)
    out = np.zeros((N, C) + px.shape[1:], dtype=x.dtype)
    for _, _, valid, flat, w in corners:
        out += _gather(xf, flat, valid) * w[:, None]
    return out


def bilinear_backward(x: np.ndarray, px: np.ndarray, py: np.ndarray, gout: np.ndarray):
    N, C, H, W = x.shape
    fx, fy, corners = _corners(px, py, H, W)
    xf = x.reshape(N, C, H * W)
    vals = {}
    gx = np.zeros(N * C * H * W, dtype=x.dtype)
    base = (np.arange(N * C, dtype=np.int64) * (H * W)).reshape(N, C, 1)
    for dy, dx, valid, flat, w in corners:
        vals[dy, dx] = _gather(xf, flat, valid)
        contrib = gout * (w * valid)[:, None]
        idx = base + flat.reshape(N, 1, -1)
        gx += np.bincount(idx.ravel(), weights=contrib.reshape(-1), minlength=gx.size).astype(x.dtype)
    a00, a01, a10, a11 = vals[0, 0], vals[0, 1], vals[1, 0], vals[1, 1]
    fx, fy = fx[:, None], fy[:, None]
    gpx = (gout * ((1 - fy) * (a01 - a00) + fy * (a11 - a10))).sum(axis=1)
    gpy = (gout * ((1 - fx) * (a10 - a00) + fx * (a11 - a01))).sum(axis=1)
    return gx.reshape(N, C, H, W), gpx.astype(x.dtype), gpy.astype(x.dtype)
