"""Training objectives of the encoder/decoder, discriminator and latent classifier."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .nn import Conv2d, Module
from .tensor import (Tensor, add, exp, log_softmax, matmul, mean, mul, relu, reshape, rng_stream, sub,
                     tabs, transpose, tsum)


@dataclass(frozen=True)
class LossWeights:
    style: float = 0.001
    content: float = 10.0
    pixel: float = 100.0
    kl: float = 1.0
    adv: float = 1.0
    cls: float = 1.0
    zrec: float = 1.0

    def __post_init__(self):
        bad = {k: v for k, v in vars(self).items() if v < 0}
        if bad:
            raise ValueError(f"loss weights must be nonnegative: {bad}")


def kl_gaussian(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over dims, averaged over the batch."""
    if mu.shape != logvar.shape:
        raise ValueError(f"kl_gaussian: mu {mu.shape} vs logvar {logvar.shape}")
    per = add(sub(add(mul(mu, mu), exp(logvar)), logvar), -1.0)
    return mul(tsum(per), 0.5 / mu.shape[0])


def dac_loss_E(logits: Tensor) -> Tensor:
    """Cross-entropy against the uniform distribution over views."""
    N, V = logits.shape
    if V < 2:
        raise ValueError("dac_loss_E needs at least two classes")
    return mul(tsum(log_softmax(logits, 1)), -1.0 / (N * V))


def dac_loss_cls(logits: Tensor, labels) -> Tensor:
    """Cross-entropy against the true source view."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    N, V = logits.shape
    if labels.shape != (N,) or labels.min() < 0 or labels.max() >= V:
        raise ValueError(f"dac_loss_cls: labels {labels.tolist()} invalid for logits {logits.shape}")
    mask = np.zeros((N, V), dtype=logits.dtype)
    mask[np.arange(N), labels] = 1.0
    return mul(tsum(mul(log_softmax(logits, 1), Tensor(mask, dtype=logits.dtype))), -1.0 / N)


def pixel_l1(x: Tensor, xr: Tensor) -> Tensor:
    return mean(tabs(sub(x, xr)))


def gram(feat: Tensor) -> Tensor:
    """``(N, C, H, W)`` -> ``(N, C, C)`` channel inner products divided by ``H*W``."""
    N, C, H, W = feat.shape
    grams = []
    flat = reshape(feat, (N, C, H * W))
    for n in range(N):
        fn = flat[n]
        grams.append(reshape(matmul(fn, transpose(fn)), (1, C, C)))
    from .tensor import concat

    return mul(concat(grams, 0), 1.0 / (H * W))


class FeatureExtractor(Module):
    """Frozen, seed-initialized conv stack standing in for a pretrained classifier.

    Stage ``i`` (1-based) is ``[down_avg2 if i > 1] -> conv3x3 -> lrelu``.
    ``taps`` lists the stages whose outputs are compared.
    """

    def __init__(self, widths=(8, 16, 32, 32, 32), taps=(2, 3, 4), seed: int = 0):
        rng = rng_stream(seed, "feature_extractor")
        self.taps = tuple(taps)
        if not self.taps or min(self.taps) < 1 or max(self.taps) > len(widths):
            raise ValueError(f"tap indices {taps} out of range for {len(widths)} stages")
        chans = (3,) + tuple(widths)
        self.stages = [Conv2d(chans[i], chans[i + 1], 3, rng=rng) for i in range(len(widths))]
        for p in self.parameters():
            p.requires_grad = False

    def load_weights(self, table: dict[str, np.ndarray]) -> None:
        """Replace weights from a name -> array table (checkpoint tensor format)."""
        for name, p in self.named_parameters():
            if name in table:
                if table[name].shape != p.shape:
                    raise ValueError(f"{name}: shape {table[name].shape} != {p.shape}")
                p.data = np.array(table[name], dtype=p.dtype)

    def forward(self, x: Tensor) -> list[Tensor]:
        feats = []
        h = x
        for i, conv in enumerate(self.stages[: max(self.taps)], start=1):
            if i > 1:
                h = F.resample(h, "down_avg2")
            h = F.lrelu(conv(h))
            if i in self.taps:
                feats.append(h)
        return feats


def content_loss(fx: list[Tensor], fxr: list[Tensor]) -> Tensor:
    total = None
    for a, b in zip(fx, fxr):
        term = mean(tabs(sub(a, b)))
        total = term if total is None else add(total, term)
    return total


def style_loss(fx: list[Tensor], fxr: list[Tensor]) -> Tensor:
    total = None
    for a, b in zip(fx, fxr):
        term = mean(tabs(sub(gram(a), gram(b))))
        total = term if total is None else add(total, term)
    return total


def perceptual_losses(x: Tensor, xr: Tensor, fe: FeatureExtractor) -> dict[str, Tensor]:
    """Pixel, content and style losses between a reference ``x`` and a synthesis ``xr``."""
    if x.shape != xr.shape:
        raise ValueError(f"perceptual losses: shapes {x.shape} vs {xr.shape}")
    fx = [f.detach() for f in fe(x.detach())]
    fxr = fe(xr)
    return {"pixel": pixel_l1(x.detach(), xr), "content": content_loss(fx, fxr), "style": style_loss(fx, fxr)}


def z_reconstruction(z: Tensor, z_rec: Tensor) -> Tensor:
    if z.shape != z_rec.shape:
        raise ValueError(f"z_reconstruction: {z.shape} vs {z_rec.shape}")
    return mean(tabs(sub(z, z_rec)))


def hinge_d(real: Tensor, fakes: list[Tensor]) -> Tensor:
    """mean relu(1 - real) + sum over fake groups of mean relu(1 + fake)."""
    if len(fakes) != 3:
        raise ValueError(f"hinge_d expects 3 fake groups, got {len(fakes)}")
    total = mean(relu(mul(add(real, -1.0), -1.0)))
    for f in fakes:
        total = add(total, mean(relu(add(f, 1.0))))
    return total


def hinge_g(fakes: list[Tensor]) -> Tensor:
    """sum over fake groups of mean relu(1 - fake)."""
    if len(fakes) != 3:
        raise ValueError(f"hinge_g expects 3 fake groups, got {len(fakes)}")
    total = None
    for f in fakes:
        term = mean(relu(mul(add(f, -1.0), -1.0)))
        total = term if total is None else add(total, term)
    return total


EG_TERMS = ("kl", "adv", "style", "content", "pixel", "cls", "zrec")


def total_eg(components: dict[str, Tensor], w: LossWeights = LossWeights(), use_cls: bool = True) -> Tensor:
    """Weighted encoder/decoder objective.

    Required keys: ``kl, adv, style, content, pixel, zrec`` and ``cls`` when
    ``use_cls``.  Optional ``paired_pixel``/``paired_content``/``paired_style``
    reuse the pixel/content/style weights.
    """
    need = [k for k in EG_TERMS if k != "cls" or use_cls]
    missing = [k for k in need if k not in components]
    if missing:
        raise KeyError(f"total_eg: missing components {missing}")
    coef = {"kl": w.kl, "adv": w.adv, "style": w.style, "content": w.content, "pixel": w.pixel,
            "cls": w.cls, "zrec": w.zrec, "paired_pixel": w.pixel, "paired_content": w.content,
            "paired_style": w.style}
    total = None
    for k, v in components.items():
        if k == "cls" and not use_cls:
            continue
        if k not in coef:
            raise KeyError(f"total_eg: unknown component {k!r}")
        term = mul(v, coef[k])
        total = term if total is None else add(total, term)
    return total
