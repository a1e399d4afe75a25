"""Encoder, decoder, projection discriminator and latent view classifier.

Widths follow the appendix layer tables scaled by ``base`` (32 reproduces the
published 128x128 configuration); ``NetworkSpec.desk()`` is the CPU-sized
default.  Ablation presets select the wiring:

======  ==============================================================
preset  wiring
======  ==============================================================
A       label planes concatenated at E input, one-hot concatenated to z
B       A's labels removed; CDM output fused by a 1x1 conv, IN residuals
C       B + DFNM residual blocks fed by the CDM output
D       C + latent view classifier (DAC)
E       D with one filter per network convolving 18 offset groups
F       D with the Psi MLPs of E reused (aliased) by G
======  ==============================================================
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import functional as F
from .cdm import CDM, CdmConfig, CdmOutput, label_matrix
from .dfnm import ResidualBlock
from .nn import Conv2d, ConvTranspose2d, Linear, Module, SNConv2d, SNLinear
from .tensor import Tensor, add, concat, exp, mul, reshape, rng_stream, tanh, tsum

PRESETS = {
    "A": dict(label_concat=True, use_cdm=False, use_dfnm=False, use_dac=False),
    "B": dict(label_concat=False, use_cdm=True, use_dfnm=False, use_dac=False),
    "C": dict(label_concat=False, use_cdm=True, use_dfnm=True, use_dac=False),
    "D": dict(label_concat=False, use_cdm=True, use_dfnm=True, use_dac=True),
    "E": dict(label_concat=False, use_cdm=True, use_dfnm=True, use_dac=True, cfc_variant="shared_xy"),
    "F": dict(label_concat=False, use_cdm=True, use_dfnm=True, use_dac=True, share_psi=True),
}


@dataclass
class NetworkSpec:
    image_size: int = 32
    base: int = 16
    z_dim: int = 256
    views: int = 8
    w_dim: int = 25
    fc_dim: int = 0
    dfnm_hidden: int = 0
    dac_hidden: int = 256
    decoder_variant: str = "dfnm_only"
    preset: str = "D"
    fe_widths: tuple = (8, 16, 32, 32, 32)

    def __post_init__(self):
        s = self.image_size
        if s < 16 or s & (s - 1):
            raise ValueError(f"image_size must be a power of two >= 16, got {s}")
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; valid: {', '.join(PRESETS)}")
        if self.decoder_variant not in ("dfnm_only", "adain_plus_dfnm"):
            raise ValueError(f"unknown decoder_variant {self.decoder_variant!r}")
        if self.decoder_variant == "adain_plus_dfnm" and not self.wiring["use_dfnm"]:
            raise ValueError("adain_plus_dfnm decoder needs a preset with DFNM (C-F)")
        if self.views < 2:
            raise ValueError("need at least two views")
        self.fc_dim = self.fc_dim or 32 * self.base
        self.dfnm_hidden = self.dfnm_hidden or 4 * self.base
        self.fe_widths = tuple(self.fe_widths)

    @classmethod
    def full_scale(cls, views: int = 13, **kw) -> "NetworkSpec":
        return cls(image_size=128, base=32, views=views, **kw)

    @classmethod
    def desk(cls, **kw) -> "NetworkSpec":
        return cls(**kw)

    @property
    def wiring(self) -> dict:
        w = dict(cfc_variant="separate_xy", share_psi=False)
        w.update(PRESETS[self.preset])
        return w

    @property
    def channels(self) -> int:
        return 4 * self.base

    @property
    def cdm_size(self) -> int:
        return self.image_size // 8

    def cdm_config(self) -> CdmConfig:
        w = self.wiring
        return CdmConfig(channels=self.channels, w_dim=self.w_dim, cfc_variant=w["cfc_variant"],
                         share_psi_eg=w["share_psi"])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fe_widths"] = list(self.fe_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        d = dict(d)
        d["fe_widths"] = tuple(d.get("fe_widths", cls.fe_widths))
        return cls(**d)


@dataclass
class EncoderOutput:
    mu: Tensor
    logvar: Tensor
    cdm: CdmOutput | None = None


def _label_planes(y, views: int, shape, dtype) -> Tensor:
    lab = label_matrix(y, views).astype(dtype)
    N, _, H, W = shape
    return Tensor(np.broadcast_to(lab[:, :, None, None], (N, views, H, W)), dtype=dtype)


def _stage_conv(cin, cout, k, spatial, rng, min_size=2):
    """Stride-2 conv while the map is larger than ``min_size``, else a 3x3 stride-1 conv."""
    if spatial > min_size:
        return Conv2d(cin, cout, k, stride=2, padding=(k - 1) // 2, rng=rng), spatial // 2
    return Conv2d(cin, cout, 3, stride=1, padding=1, rng=rng), spatial


class Encoder(Module):
    def __init__(self, spec: NetworkSpec, rng: np.random.Generator):
        self.spec = spec
        w, b = spec.wiring, spec.base
        C = spec.channels
        cin = 3 + (spec.views if w["label_concat"] else 0)
        self.conv_in = Conv2d(cin, b, 7, rng=rng)
        self.down = [
            Conv2d(b, 2 * b, 4, stride=2, padding=1, rng=rng),
            Conv2d(2 * b, C, 4, stride=2, padding=1, rng=rng),
            Conv2d(C, C, 4, stride=2, padding=1, rng=rng),
        ]
        if w["use_cdm"]:
            self.cdm = CDM(spec.cdm_config(), spec.views, rng, prefix="E")
            if not w["use_dfnm"]:
                self.fuse = Conv2d(2 * C, C, 1, rng=rng)
        norm = "dfnm" if w["use_dfnm"] else "instance"
        self.blocks = [ResidualBlock(C, 2 * C, norm, rng, hidden=spec.dfnm_hidden) for _ in range(3)]
        s = spec.cdm_size
        c1, s = _stage_conv(C, C, 4, s, rng)
        c2, s = _stage_conv(C, C, 3, s, rng)
        self.post = [c1, c2]
        self.final_size = s
        self.fc = Linear(C * s * s, spec.fc_dim, rng=rng)
        self.mu = Linear(spec.fc_dim, spec.z_dim, rng=rng, gain=0.5)
        self.logvar = Linear(spec.fc_dim, spec.z_dim, rng=rng, gain=0.1)

    def forward(self, x: Tensor, y, noise=None) -> EncoderOutput:
        spec = self.spec
        S = spec.image_size
        if x.ndim != 4 or x.shape[1:] != (3, S, S):
            raise ValueError(f"encoder expects images (N, 3, {S}, {S}), got {x.shape}")
        w = spec.wiring
        if w["label_concat"]:
            x = concat([x, _label_planes(y, spec.views, x.shape, x.dtype)], axis=1)
        h = F.lrelu(F.normalize(self.conv_in(x), "instance"))
        for conv in self.down:
            h = F.lrelu(F.normalize(conv(h), "instance"))
        side, cdm_out = None, None
        if w["use_cdm"]:
            cdm_out = self.cdm(h, y, noise)
            side = cdm_out.out
            if not w["use_dfnm"]:
                h = self.fuse(side)
        for blk in self.blocks:
            h = blk(h, side)
        for conv in self.post:
            h = F.lrelu(F.normalize(conv(h), "instance"))
        h = F.lrelu(self.fc(reshape(h, (h.shape[0], -1))))
        return EncoderOutput(self.mu(h), self.logvar(h), cdm_out)


def encode(E: Encoder, x: Tensor, y, noise=None) -> EncoderOutput:
    return E(x, y, noise)


def reparameterize(out: EncoderOutput, noise) -> Tensor:
    """``mu + exp(0.5 * logvar) * noise``."""
    noise = noise if isinstance(noise, Tensor) else Tensor(noise, dtype=out.mu.dtype)
    if noise.shape != out.mu.shape:
        raise ValueError(f"reparameterize: noise {noise.shape} vs mu {out.mu.shape}")
    return add(out.mu, mul(exp(mul(out.logvar, 0.5)), noise))


class Decoder(Module):
    def __init__(self, spec: NetworkSpec, rng: np.random.Generator, encoder: Encoder | None = None):
        self.spec = spec
        w, b = spec.wiring, spec.base
        C = spec.channels
        S = spec.image_size
        self.start = max(S // 32, 1)
        zin = spec.z_dim + (spec.views if w["label_concat"] else 0)
        self.fc = Linear(zin, C * self.start ** 2, rng=rng)
        self.conv_in = Conv2d(C, C, 3, rng=rng)
        self.up = []
        s = self.start
        for _ in range(2):
            if s < spec.cdm_size:
                self.up.append(ConvTranspose2d(C, C, 4, 2, 1, rng=rng))
                s *= 2
            else:
                self.up.append(Conv2d(C, C, 3, rng=rng))
        if w["use_cdm"]:
            borrow = encoder.cdm if (w["share_psi"] and encoder is not None) else None
            if w["share_psi"] and borrow is None:
                raise ValueError("preset F needs the encoder to share its Psi networks")
            self.cdm = CDM(spec.cdm_config(), spec.views, rng, prefix="G", borrow=borrow)
            if not w["use_dfnm"]:
                self.fuse = Conv2d(2 * C, C, 1, rng=rng)
        if not w["use_dfnm"]:
            norm = "instance"
        else:
            norm = "adain_dfnm" if spec.decoder_variant == "adain_plus_dfnm" else "dfnm"
        self.blocks = [ResidualBlock(C, 2 * C, norm, rng, hidden=spec.dfnm_hidden, z_dim=spec.z_dim)
                       for _ in range(3)]
        widths = [C, C, 2 * b, b]
        kernels = [3, 3, 7]
        self.tail = [Conv2d(widths[i], widths[i + 1], kernels[i], rng=rng) for i in range(3)]
        self.to_rgb = Conv2d(b, 3, 1, rng=rng, gain=0.5)

    def forward(self, z: Tensor, y, noise=None, filters=None, return_cdm: bool = False):
        spec = self.spec
        w = spec.wiring
        C = spec.channels
        zin = z
        if w["label_concat"]:
            zin = concat([z, Tensor(label_matrix(y, spec.views), dtype=z.dtype)], axis=1)
        h = reshape(self.fc(zin), (z.shape[0], C, self.start, self.start))
        h = F.lrelu(self.conv_in(h))
        for layer in self.up:
            h = F.lrelu(layer(h))
        side, cdm_out = None, None
        if w["use_cdm"]:
            cdm_out = self.cdm(h, y, noise, filters=filters)
            side = cdm_out.out
            if not w["use_dfnm"]:
                h = self.fuse(side)
        for blk in self.blocks:
            h = blk(h, side, z)
        for conv in self.tail:
            h = F.lrelu(F.normalize(conv(F.resample(h, "up_nearest2")), "layer"))
        img = tanh(self.to_rgb(h))
        return (img, cdm_out) if return_cdm else img


def decode(G: Decoder, z: Tensor, y, noise=None) -> Tensor:
    return G(z, y, noise)


class DiscBlock(Module):
    """Spectral-normalized pre-activation residual block."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.conv1 = SNConv2d(cin, cout, 3, rng=rng)
        self.conv2 = SNConv2d(cout, cout, 3, rng=rng)
        self.skip = SNConv2d(cin, cout, 1, rng=rng) if cin != cout else None

    def forward(self, x: Tensor) -> Tensor:
        t = self.conv2(F.lrelu(self.conv1(F.lrelu(x))))
        return add(self.skip(x) if self.skip is not None else x, t)


class Discriminator(Module):
    def __init__(self, spec: NetworkSpec, rng: np.random.Generator):
        self.spec = spec
        b = spec.base
        self.conv_in = SNConv2d(3, 2 * b, 1, rng=rng)
        self.blocks = [DiscBlock(2 * b, 4 * b, rng), DiscBlock(4 * b, 4 * b, rng), DiscBlock(4 * b, 8 * b, rng)]
        self.conv_a = SNConv2d(8 * b + 1, 8 * b, 3, rng=rng)
        self.conv_b = SNConv2d(8 * b, 8 * b, 4, padding=1, rng=rng)
        self.head = SNLinear(8 * b, 1, rng=rng)
        self.embed = SNLinear(spec.views, 8 * b, rng=rng, bias=False)

    def features(self, x: Tensor) -> Tensor:
        h = F.lrelu(self.conv_in(x))
        for blk in self.blocks:
            h = F.resample(blk(h), "down_avg2")
        h = F.minibatch_std_concat(h)
        h = F.lrelu(self.conv_a(h))
        h = F.lrelu(self.conv_b(h))
        return F.global_sum(h)

    def forward(self, x: Tensor, y) -> Tensor:
        if x.shape[0] < 2:
            raise ValueError("discriminator needs a batch of at least 2 (minibatch statistics)")
        phi = self.features(x)
        lab = Tensor(label_matrix(y, self.spec.views), dtype=phi.dtype)
        proj = tsum(mul(self.embed(lab), phi), 1)
        return add(reshape(self.head(phi), (x.shape[0],)), proj)


def discriminate(D: Discriminator, x: Tensor, y) -> Tensor:
    return D(x, y)


class DAC(Module):
    """Two fully connected layers classifying the view from the latent code."""

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator):
        self.fc1 = Linear(spec.z_dim, spec.dac_hidden, rng=rng)
        self.fc2 = Linear(spec.dac_hidden, spec.views, rng=rng)

    def forward(self, z: Tensor) -> Tensor:
        return self.fc2(F.lrelu(self.fc1(z)))


def dac_forward(dac: DAC, z: Tensor) -> Tensor:
    return dac(z)


class Model(Module):
    """All trainable networks of one run."""

    def __init__(self, spec: NetworkSpec, seed: int = 0):
        self.spec = spec
        self.encoder = Encoder(spec, rng_stream(seed, "init/encoder"))
        self.decoder = Decoder(spec, rng_stream(seed, "init/decoder"), encoder=self.encoder)
        self.disc = Discriminator(spec, rng_stream(seed, "init/disc"))
        if spec.wiring["use_dac"]:
            self.dac = DAC(spec, rng_stream(seed, "init/dac"))

    @property
    def has_dac(self) -> bool:
        return "dac" in vars(self)

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Parameters and spectral buffers by name."""
        out = {name: p.data for name, p in self.named_parameters()}
        out.update({f"{name}.u": s.u for name, s in self.named_buffers()})
        return out

    def load_state(self, table: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        bufs = {f"{name}.u": s for name, s in self.named_buffers()}
        missing = [k for k in list(params) + list(bufs) if k not in table]
        if missing:
            raise KeyError(f"checkpoint lacks tensors: {missing[:5]}{'...' if len(missing) > 5 else ''}")
        for k, p in params.items():
            if table[k].shape != p.shape:
                raise ValueError(f"tensor {k}: checkpoint shape {table[k].shape} != model {p.shape}")
        for k, p in params.items():
            p.data = np.array(table[k], dtype=p.dtype)
        for k, s in bufs.items():
            s.u = np.array(table[k], dtype=s.u.dtype)
