"""Differentiable neural-network kernels on NCHW tensors.

Convolutions lower to ``im2col`` + one GEMM; deformable convolution lowers to
bilinear sampling + one GEMM.  The patch/sampling loops live in
:mod:`cdvae.kernels`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .tensor import Tensor, add, concat, expand, leaky_relu, make, matmul, mul, reshape, transpose, tsum

EPS = 1e-5
LRELU_SLOPE = 0.2


@dataclass
class ConvParams:
    weight: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0
    groups: int = 1


def _out(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """Cross-correlation; ``weight`` is ``(C_out, C_in/groups, kh, kw)``."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d: expected 4-d input and weight, got {x.shape}, {weight.shape}")
    N, C, H, W = x.shape
    O, Cg, kh, kw = weight.shape
    if C % groups or O % groups or Cg != C // groups:
        raise ValueError(f"conv2d: input channels {C}, weight {weight.shape}, groups {groups} inconsistent")
    if bias is not None and bias.shape != (O,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({O},)")
    Ho, Wo = _out(H, kh, stride, padding), _out(W, kw, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ValueError(f"conv2d: kernel {kh}x{kw} too large for input {H}x{W}")
    xd, wd = x.data, weight.data
    Og = O // groups
    cols, outs = [], []
    for g in range(groups):
        c = kernels.im2col(xd[:, g * Cg:(g + 1) * Cg], kh, kw, stride, padding)
        cols.append(c)
        outs.append(wd[g * Og:(g + 1) * Og].reshape(Og, -1) @ c)
    out2d = outs[0] if groups == 1 else np.concatenate(outs, axis=0)
    if bias is not None:
        out2d += bias.data[:, None]
    out = np.ascontiguousarray(out2d.reshape(O, N, Ho, Wo).transpose(1, 0, 2, 3))

    def bw(g):
        g2d = g.transpose(1, 0, 2, 3).reshape(O, -1)
        gx = np.empty_like(xd) if x.requires_grad else None
        gw = np.empty_like(wd) if weight.requires_grad else None
        for k in range(groups):
            gk = g2d[k * Og:(k + 1) * Og]
            if gw is not None:
                gw[k * Og:(k + 1) * Og] = (gk @ cols[k].T).reshape(Og, Cg, kh, kw)
            if gx is not None:
                wk = wd[k * Og:(k + 1) * Og].reshape(Og, -1)
                gx[:, k * Cg:(k + 1) * Cg] = kernels.col2im(wk.T @ gk, (N, Cg, H, W), kh, kw, stride, padding)
        gb = g2d.sum(axis=1) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make("conv2d", out, parents, bw)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2,
                     padding: int = 1) -> Tensor:
    """Adjoint of :func:`conv2d`; ``weight`` is ``(C_in, C_out, kh, kw)``."""
    N, C, H, W = x.shape
    Ci, O, kh, kw = weight.shape
    if Ci != C:
        raise ValueError(f"conv_transpose2d: input channels {C} != weight {weight.shape}")
    Ho, Wo = (H - 1) * stride - 2 * padding + kh, (W - 1) * stride - 2 * padding + kw
    xd, wd = x.data, weight.data
    x2d = xd.transpose(1, 0, 2, 3).reshape(C, -1)
    wm = wd.reshape(C, O * kh * kw)
    out = kernels.col2im(wm.T @ x2d, (N, O, Ho, Wo), kh, kw, stride, padding)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        gcols = kernels.im2col(g, kh, kw, stride, padding)
        gx = (wm @ gcols).reshape(C, N, H, W).transpose(1, 0, 2, 3) if x.requires_grad else None
        gw = (x2d @ gcols.T).reshape(wd.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make("conv_transpose2d", out, parents, bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped ``(out, in)``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        return (gx, gw, g.sum(axis=0)) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make("linear", out, parents, bw)


def lrelu(x: Tensor) -> Tensor:
    return leaky_relu(x, LRELU_SLOPE)


def bilinear_sample(x: Tensor, px: Tensor, py: Tensor) -> Tensor:
    """Sample ``x`` at absolute pixel coordinates.

    ``px``/``py`` are ``(N, K, Ho, Wo)`` column/row positions.  Returns
    ``(N, C*K, Ho, Wo)`` with channel index ``c*K + k``.  Neighbours outside the
    image contribute zero.
    """
    if px.shape != py.shape or px.ndim != 4 or px.shape[0] != x.shape[0]:
        raise ValueError(f"bilinear_sample: coordinate shapes {px.shape}, {py.shape} vs input {x.shape}")
    if not (np.isfinite(px.data).all() and np.isfinite(py.data).all()):
        raise FloatingPointError("bilinear_sample: non-finite sampling coordinates")
    N, C = x.shape[:2]
    K, Ho, Wo = px.shape[1:]
    xd, pxd, pyd = x.data, px.data, py.data
    out = kernels.bilinear_forward(xd, pxd, pyd)

    def bw(g):
        gx, gpx, gpy = kernels.bilinear_backward(xd, pxd, pyd, g.reshape(N, C, K, Ho, Wo))
        return gx, gpx, gpy

    return make("bilinear_sample", out.reshape(N, C * K, Ho, Wo), (x, px, py), bw)


_TAP_DY = np.repeat(np.arange(-1, 2), 3)  # tap k = 3*i + j -> row offset i-1
_TAP_DX = np.tile(np.arange(-1, 2), 3)


def tap_grid(N: int, H: int, W: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    """Base sampling coordinates of a 3x3 stencil: ``(N, 9, H, W)`` each."""
    ys, xs = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    py = ys[None, None] + _TAP_DY[None, :, None, None]
    px = xs[None, None] + _TAP_DX[None, :, None, None]
    return (np.broadcast_to(px, (N, 9, H, W)).astype(dtype),
            np.broadcast_to(py, (N, 9, H, W)).astype(dtype))


def deformable_conv3x3(x: Tensor, dx: Tensor, dy: Tensor, weight: Tensor,
                       bias: Tensor | None = None) -> Tensor:
    """3x3 stride-1 convolution whose tap ``k`` reads ``x`` at ``base_k + (dy_k, dx_k)``."""
    N, C, H, W = x.shape
    if dx.shape != (N, 9, H, W) or dy.shape != (N, 9, H, W):
        raise ValueError(f"deformable_conv3x3: flow shapes {dx.shape}, {dy.shape} must be {(N, 9, H, W)}")
    if weight.ndim != 4 or weight.shape[1:] != (C, 3, 3):
        raise ValueError(f"deformable_conv3x3: weight {weight.shape} must be (O, {C}, 3, 3)")
    O = weight.shape[0]
    bx, by = tap_grid(N, H, W, x.dtype)
    px = add(dx, Tensor(bx, dtype=x.dtype))
    py = add(dy, Tensor(by, dtype=x.dtype))
    sampled = bilinear_sample(x, px, py)  # (N, C*9, H, W)
    cols = transpose_cols(sampled)
    out = matmul(reshape(weight, (O, C * 9)), cols)  # (O, N*H*W)
    if bias is not None:
        out = add(out, expand(reshape(bias, (O, 1)), out.shape))
    return transpose(reshape(out, (O, N, H, W)), (1, 0, 2, 3))


def transpose_cols(t: Tensor) -> Tensor:
    """``(N, R, H, W)`` -> ``(R, N*H*W)``."""
    N, R, H, W = t.shape
    return reshape(transpose(t, (1, 0, 2, 3)), (R, N * H * W))


def kgconv(features: Tensor, w: Tensor, groups: int) -> Tensor:
    """1x1 convolution of each channel group with a supplied filter.

    ``features`` is ``(N, G*Cg, H, W)`` and ``w`` is ``(Cg,)`` or per-sample
    ``(N, Cg)``.  Returns ``(N, G, H, W)``; there is no bias.
    """
    N, Ct, H, W = features.shape
    if Ct % groups:
        raise ValueError(f"kgconv: {Ct} channels not divisible into {groups} groups")
    Cg = Ct // groups
    wd = w.data if w.ndim == 2 else np.broadcast_to(w.data, (N,) + w.shape)
    if wd.shape != (N, Cg):
        raise ValueError(f"kgconv: filter shape {w.shape} does not match group width {Cg}")
    fd = features.data.reshape(N, groups, Cg, H, W)
    out = np.einsum("ngchw,nc->nghw", fd, wd, optimize=True)

    def bw(g):
        gf = (g[:, :, None] * wd[:, None, :, None, None]).reshape(N, Ct, H, W)
        gw = np.einsum("nghw,ngchw->nc", g, fd, optimize=True)
        return gf, (gw if w.ndim == 2 else gw.sum(axis=0))

    return make("kgconv", np.ascontiguousarray(out), (features, w), bw)


_NORM_AXES = {"instance": (2, 3), "batch_stats": (0, 2, 3), "layer": (1, 2, 3), "pixel": (1,)}


def normalize(x: Tensor, kind: str, gamma: Tensor | None = None, beta: Tensor | None = None,
              eps: float = EPS) -> Tensor:
    """Standardize ``x`` over the axes of ``kind``; optional per-channel affine.

    ``instance``: per (n, c) over H, W.  ``batch_stats``: per c over N, H, W
    using the current batch only.  ``layer``: per n over C, H, W.  ``pixel``:
    divide by the root mean square over channels (no centering).
    """
    if kind not in _NORM_AXES:
        raise ValueError(f"normalize: unknown kind {kind!r}; expected one of {sorted(_NORM_AXES)}")
    axes = _NORM_AXES[kind]
    if kind in ("instance", "batch_stats") and int(np.prod([x.shape[a] for a in axes])) < 2:
        raise ValueError(f"normalize({kind}): need at least 2 elements per statistic, input {x.shape}")
    xd = x.data
    if kind == "pixel":
        inv = 1.0 / np.sqrt((xd * xd).mean(axis=axes, keepdims=True) + eps)
        y = xd * inv

        def bw(g):
            return (inv * (g - y * (g * y).mean(axis=axes, keepdims=True)),)
    else:
        mu = xd.mean(axis=axes, keepdims=True)
        xc = xd - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=axes, keepdims=True) + eps)
        y = xc * inv

        def bw(g):
            gm = g.mean(axis=axes, keepdims=True)
            gym = (g * y).mean(axis=axes, keepdims=True)
            return (inv * (g - gm - y * gym),)

    out = make("normalize_" + kind, y, (x,), bw)
    if gamma is not None or beta is not None:
        C = x.shape[1]
        if gamma is not None:
            _check_len("normalize", gamma, C)
            out = mul(out, expand(reshape(gamma, (1, C, 1, 1)), x.shape))
        if beta is not None:
            _check_len("normalize", beta, C)
            out = add(out, expand(reshape(beta, (1, C, 1, 1)), x.shape))
    return out


def _check_len(op: str, t: Tensor, C: int) -> None:
    if t.shape not in ((C,),):
        raise ValueError(f"{op}: affine parameter shape {t.shape} != ({C},)")


def adain(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Instance-normalize then scale/shift per channel.

    ``gamma``/``beta`` are ``(C,)`` shared over the batch or ``(N, C)`` per sample.
    """
    N, C = x.shape[:2]
    if gamma.shape not in ((C,), (N, C)) or beta.shape != gamma.shape:
        raise ValueError(f"adain: style shapes {gamma.shape}, {beta.shape} incompatible with {x.shape}")
    h = normalize(x, "instance")
    shp = (1, C, 1, 1) if gamma.ndim == 1 else (N, C, 1, 1)
    return add(mul(h, expand(reshape(gamma, shp), x.shape)), expand(reshape(beta, shp), x.shape))


@dataclass
class SpectralState:
    u: np.ndarray
    n_power_iterations: int = 1

    @classmethod
    def warm(cls, weight: np.ndarray, n_power_iterations: int = 1) -> "SpectralState":
        """Start ``u`` at the leading left singular vector of ``weight``.

        Power iteration from a random vector converges at rate
        ``(sigma_2 / sigma_1) ** 2`` per step, which is close to 1 for random
        initial weights; the warm start removes that transient.
        """
        W = np.asarray(weight, dtype=np.float64).reshape(weight.shape[0], -1)
        u = np.linalg.svd(W, full_matrices=False)[0][:, 0]
        if u[np.argmax(np.abs(u))] < 0:
            u = -u
        return cls(u, n_power_iterations)


def spectral_normalize(weight: Tensor, state: SpectralState, update: bool = True) -> Tensor:
    """Divide ``weight`` by its power-iteration estimate ``sigma = u^T W v``.

    The gradient flows through ``sigma`` with ``u`` and ``v`` held constant.
    With ``update`` the state's ``u`` advances by ``n_power_iterations`` steps
    first.
    """
    W = weight.data.reshape(weight.shape[0], -1).astype(np.float64)
    if not np.any(W):
        raise ValueError("spectral_normalize: zero weight matrix has undefined spectral norm")
    u = state.u.astype(np.float64)
    v = _unit(W.T @ u)
    if update:
        for _ in range(max(1, state.n_power_iterations)):
            v = _unit(W.T @ u)
            u = _unit(W @ v)
        state.u = u.astype(state.u.dtype)
    sigma = float(u @ W @ v)
    if not np.isfinite(sigma) or sigma <= 0:
        raise FloatingPointError(f"spectral_normalize: degenerate sigma estimate {sigma}")
    wd = weight.data
    out = wd / np.asarray(sigma, dtype=wd.dtype)
    uv = np.outer(u, v).reshape(wd.shape)

    def bw(g):
        # d(W/sigma) with d(sigma)/dW = u v^T
        inner = float(np.sum(g.astype(np.float64) * wd))
        return ((g / sigma - (inner / sigma ** 2) * uv).astype(wd.dtype),)

    return make("spectral_normalize", out, (weight,), bw)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / max(np.linalg.norm(v), 1e-12)


def minibatch_std_concat(x: Tensor) -> Tensor:
    """Append one channel holding the batch-averaged population std."""
    N, C, H, W = x.shape
    if N < 2:
        raise ValueError("minibatch_std_concat: needs a batch of at least 2")
    xd = x.data
    centered = xd - xd.mean(axis=0, keepdims=True)
    std = np.sqrt((centered ** 2).mean(axis=0))  # (C,H,W)
    feat = np.full((N, 1, H, W), std.mean(), dtype=xd.dtype)
    # d std / d x is undefined where std == 0; use 0 there
    inv = np.divide(1.0, std, out=np.zeros_like(std), where=std > 0)

    def bw(g):
        return (g.sum() / std.size * centered * (inv[None] / N),)

    stat = make("minibatch_std", feat, (x,), bw)
    return concat([x, stat], axis=1)


def resample(x: Tensor, mode: str) -> Tensor:
    N, C, H, W = x.shape
    if mode == "down_avg2":
        if H % 2 or W % 2:
            raise ValueError(f"resample(down_avg2): odd spatial extent {H}x{W}")
        out = x.data.reshape(N, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

        def bw(g):
            return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

        return make("down_avg2", out, (x,), bw)
    if mode == "up_nearest2":
        out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

        def bw(g):
            return (g.reshape(N, C, H, 2, W, 2).sum(axis=(3, 5)),)

        return make("up_nearest2", out, (x,), bw)
    raise ValueError(f"resample: unknown mode {mode!r}")


def global_sum(x: Tensor) -> Tensor:
    """Sum over spatial axes: ``(N, C, H, W)`` -> ``(N, C)``."""
    return tsum(x, (2, 3))
