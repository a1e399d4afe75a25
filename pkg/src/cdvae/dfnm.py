"""Deformed-feature based normalization and the residual blocks built on it."""
from __future__ import annotations

import numpy as np

from . import functional as F
from .nn import Conv2d, Linear, Module
from .tensor import Tensor, add, concat, mul


class DfnmLayer(Module):
    """Batch-statistics normalization with per-site scale/offset from a side input.

    ``out = gamma(side) * normalize(h) + beta(side)`` where ``gamma`` and
    ``beta`` are 3x3 conv heads over a shared conv + lrelu trunk.
    """

    def __init__(self, channels: int, side_channels: int, hidden: int, rng: np.random.Generator):
        self.shared = Conv2d(side_channels, hidden, 3, rng=rng)
        self.gamma = Conv2d(hidden, channels, 3, rng=rng, gain=0.1)
        self.beta = Conv2d(hidden, channels, 3, rng=rng, gain=0.1)
        self.gamma.bias.data[:] = 1.0

    def forward(self, h: Tensor, side: Tensor) -> Tensor:
        return dfnm_forward(h, side, self)


def dfnm_forward(h: Tensor, side: Tensor, layer: DfnmLayer) -> Tensor:
    if h.shape[2:] != side.shape[2:]:
        if side.shape[2] * 2 == h.shape[2] and side.shape[3] * 2 == h.shape[3]:
            side = F.resample(side, "up_nearest2")
        elif side.shape[2] == 2 * h.shape[2] and side.shape[3] == 2 * h.shape[3]:
            side = F.resample(side, "down_avg2")
        else:
            raise ValueError(f"DFNM: main branch {h.shape} and side input {side.shape} differ spatially")
    a = F.lrelu(layer.shared(side))
    return add(mul(F.normalize(h, "batch_stats"), layer.gamma(a)), layer.beta(a))


class InstanceNormLayer(Module):
    """Parameter-free instance norm with the DFNM call signature (side input ignored)."""

    def forward(self, h: Tensor, side: Tensor | None = None) -> Tensor:
        return F.normalize(h, "instance")


class AdainDfnmLayer(Module):
    """DFNM and AdaIN(z) applied to the same input, concatenated on channels."""

    def __init__(self, channels: int, side_channels: int, hidden: int, z_dim: int, rng: np.random.Generator):
        self.dfnm = DfnmLayer(channels, side_channels, hidden, rng)
        self.style = Linear(z_dim, 2 * channels, rng=rng, gain=0.1)
        self.style.bias.data[:channels] = 1.0
        self.channels = channels

    def forward(self, h: Tensor, side: Tensor, z: Tensor | None = None) -> Tensor:
        if z is None:
            raise ValueError("AdaIN branch needs the latent code")
        C = self.channels
        st = self.style(z)
        gamma, beta = st[:, :C], st[:, C:]
        return concat([self.dfnm(h, side), F.adain(h, gamma, beta)], axis=1)


class ResidualBlock(Module):
    """``h + conv(lrelu(norm2(conv(lrelu(norm1(h, side))), side)))``.

    ``norm`` is ``"dfnm"``, ``"instance"`` or ``"adain_dfnm"``; the last one
    doubles the width seen by the following conv.
    """

    def __init__(self, channels: int, side_channels: int, norm: str, rng: np.random.Generator,
                 hidden: int = 128, z_dim: int = 0):
        self.norm_kind = norm
        width = 2 * channels if norm == "adain_dfnm" else channels

        def make_norm():
            if norm == "dfnm":
                return DfnmLayer(channels, side_channels, hidden, rng)
            if norm == "instance":
                return InstanceNormLayer()
            if norm == "adain_dfnm":
                return AdainDfnmLayer(channels, side_channels, hidden, z_dim, rng)
            raise ValueError(f"unknown residual norm {norm!r}")

        self.norm1 = make_norm()
        self.conv1 = Conv2d(width, channels, 3, rng=rng)
        self.norm2 = make_norm()
        self.conv2 = Conv2d(width, channels, 3, rng=rng, gain=0.5)

    def _norm(self, layer, h, side, z):
        if self.norm_kind == "adain_dfnm":
            return layer(h, side, z)
        return layer(h, side)

    def forward(self, h: Tensor, side: Tensor | None = None, z: Tensor | None = None) -> Tensor:
        t = self.conv1(F.lrelu(self._norm(self.norm1, h, side, z)))
        t = self.conv2(F.lrelu(self._norm(self.norm2, t, side, z)))
        if t.shape != h.shape:
            raise ValueError(f"residual block changed shape {h.shape} -> {t.shape}")
        return add(h, t)


def residual_block_dfnm(h: Tensor, side: Tensor, block: ResidualBlock) -> Tensor:
    return block(h, side)
