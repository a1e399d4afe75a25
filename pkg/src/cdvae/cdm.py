"""Conditional deformable module.

A view label is mapped by small MLPs (``Psi``) to latent filters.  Those
filters are convolved (as given, not learned, 1x1 kernels) with a projection
of the feature map to produce 9 pairs of per-pixel offsets, which drive a 3x3
deformable convolution of the same feature map.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .nn import Conv2d, Linear, Module, Parameter, _he
from .tensor import Tensor, concat, get_default_dtype, getitem, reshape

NOISE_DIM = 128
PSI_HIDDEN = 128


@dataclass(frozen=True)
class ViewLabel:
    index: int
    views: int

    def __post_init__(self):
        if not 0 <= self.index < self.views:
            raise ValueError(f"view index {self.index} outside [0, {self.views})")

    def one_hot(self) -> np.ndarray:
        v = np.zeros(self.views)
        v[self.index] = 1.0
        return v


def one_hot(labels, views: int, dtype=None) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= views):
        raise ValueError(f"view labels {labels.tolist()} outside [0, {views})")
    out = np.zeros((labels.size, views), dtype=dtype or get_default_dtype())
    out[np.arange(labels.size), labels] = 1.0
    return out


def label_matrix(y, views: int) -> np.ndarray:
    """Integer labels -> one-hot rows; float ``(N, V)`` rows pass through (soft labels)."""
    if isinstance(y, ViewLabel):
        return y.one_hot()[None].astype(get_default_dtype())
    arr = np.asarray(y)
    if arr.ndim == 2:
        if arr.shape[1] != views:
            raise ValueError(f"soft labels have {arr.shape[1]} columns, expected {views}")
        return arr.astype(get_default_dtype())
    return one_hot(arr, views)


@dataclass
class CdmConfig:
    channels: int = 128
    w_dim: int = 25
    cfc_variant: str = "separate_xy"
    share_psi_eg: bool = False

    def __post_init__(self):
        if self.cfc_variant not in ("separate_xy", "shared_xy"):
            raise ValueError(f"unknown cfc_variant {self.cfc_variant!r}")

    @property
    def offset_channels(self) -> int:
        return (9 if self.cfc_variant == "separate_xy" else 18) * self.w_dim


class PsiNetwork(Module):
    """label -> fc -> concat noise -> pixel norm -> fc -> latent filter."""

    def __init__(self, views: int, w_dim: int, role: str, rng: np.random.Generator):
        self.views, self.role = views, role
        self.fc1 = Linear(views, PSI_HIDDEN, rng=rng)
        self.fc2 = Linear(PSI_HIDDEN + NOISE_DIM, w_dim, rng=rng, gain=0.5)

    def forward(self, y, noise) -> Tensor:
        lab = Tensor(label_matrix(y, self.views))
        noise = noise if isinstance(noise, Tensor) else Tensor(noise)
        if noise.shape != (lab.shape[0], NOISE_DIM):
            raise ValueError(f"Psi noise must be ({lab.shape[0]}, {NOISE_DIM}), got {noise.shape}")
        h = concat([self.fc1(lab), noise], axis=1)
        h = F.normalize(reshape(h, h.shape + (1, 1)), "pixel")
        return self.fc2(reshape(h, (h.shape[0], -1)))


def psi_forward(psi: PsiNetwork, y, noise) -> Tensor:
    return psi(y, noise)


def cfc(fprime: Tensor, wx: Tensor, wy: Tensor, variant: str = "separate_xy") -> tuple[Tensor, Tensor]:
    """Conditional flow computation: ``(dx, dy)``, each ``(N, 9, H, W)``."""
    C = fprime.shape[1]
    if variant == "separate_xy":
        if wx.shape[-1] != wy.shape[-1] or C != 9 * wx.shape[-1]:
            raise ValueError(f"cfc(separate_xy): {C} channels vs filters {wx.shape}, {wy.shape}")
        return F.kgconv(fprime, wx, 9), F.kgconv(fprime, wy, 9)
    if variant == "shared_xy":
        if C != 18 * wx.shape[-1]:
            raise ValueError(f"cfc(shared_xy): {C} channels vs filter {wx.shape}")
        half = C // 2
        return (F.kgconv(getitem(fprime, (slice(None), slice(0, half))), wx, 9),
                F.kgconv(getitem(fprime, (slice(None), slice(half, C))), wx, 9))
    raise ValueError(f"unknown cfc variant {variant!r}")


@dataclass
class CdmOutput:
    out: Tensor
    dx: Tensor
    dy: Tensor
    wx: Tensor
    wy: Tensor


class CDM(Module):
    def __init__(self, cfg: CdmConfig, views: int, rng: np.random.Generator, prefix: str = "",
                 borrow: "CDM | None" = None):
        self.cfg, self.views = cfg, views
        C = cfg.channels
        dt = get_default_dtype()
        # offsets start small so the initial deformation is close to identity
        self.offset = Conv2d(C, cfg.offset_channels, 3, rng=rng, gain=0.1)
        self.deform_weight = Parameter(_he(rng, (C, C, 3, 3), C * 9), dtype=dt)
        self.deform_bias = Parameter(np.zeros(C), dtype=dt)
        if borrow is not None:
            # parameter storage is aliased, not copied; the owner registers it
            self._borrowed = borrow.psi_pair()
        else:
            self.psi_x = PsiNetwork(views, cfg.w_dim, prefix + "X", rng)
            if cfg.cfc_variant == "separate_xy":
                self.psi_y = PsiNetwork(views, cfg.w_dim, prefix + "Y", rng)

    def psi_pair(self) -> tuple[PsiNetwork, PsiNetwork]:
        if hasattr(self, "_borrowed"):
            return self._borrowed
        return self.psi_x, getattr(self, "psi_y", self.psi_x)

    def filters(self, y, noise) -> tuple[Tensor, Tensor]:
        psi_x, psi_y = self.psi_pair()
        wx = psi_x(y, noise)
        wy = wx if self.cfg.cfc_variant == "shared_xy" else psi_y(y, noise)
        return wx, wy

    def forward(self, feat: Tensor, y=None, noise=None, filters: tuple[Tensor, Tensor] | None = None) -> CdmOutput:
        if feat.shape[1] != self.cfg.channels:
            raise ValueError(f"CDM expects {self.cfg.channels} channels, got {feat.shape}")
        wx, wy = filters if filters is not None else self.filters(y, noise)
        if wx.ndim == 2 and wx.shape[0] != feat.shape[0]:
            raise ValueError(f"filters for {wx.shape[0]} samples, features for {feat.shape[0]}")
        fprime = self.offset(feat)
        dx, dy = cfc(fprime, wx, wy, self.cfg.cfc_variant)
        fd = F.deformable_conv3x3(feat, dx, dy, self.deform_weight, self.deform_bias)
        return CdmOutput(concat([fd, feat], axis=1), dx, dy, wx, wy)


def cdm_forward(feat: Tensor, y, cdm: CDM, noise) -> Tensor:
    return cdm(feat, y, noise).out
