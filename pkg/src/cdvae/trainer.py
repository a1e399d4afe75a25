"""Two-stage adversarial training loop.

Each iteration draws one unpaired batch and the step noise, generates the
reconstructed, view-translated and prior-sampled images once, then

* D-stage: updates the discriminator on detached fakes and the latent view
  classifier on the detached latent code;
* G-stage: with D and the classifier frozen, updates encoder and decoder on the
  weighted objective.

Encoder/decoder weights do not change during the D-stage, so the G-stage reuses
the generator graph built at the start of the step; the result is identical to
recomputing it with the same noise.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields

import numpy as np

from . import checkpoint as ckpt
from .cdm import NOISE_DIM
from .data import (AccessAudit, Batch, DatasetIndex, ImageStore, PairedBatch, load_directory_dataset,
                   sample_paired_batch, sample_unpaired_batch)
from .losses import (FeatureExtractor, LossWeights, dac_loss_cls, dac_loss_E, hinge_d, hinge_g, kl_gaussian,
                     perceptual_losses, total_eg, z_reconstruction)
from .metrics import eval_l1, eval_ssim, to_8bit_scale
from .networks import Model, NetworkSpec, reparameterize
from .nn import Module, frozen
from .optim import AdamState, adam_step
from .tensor import Tensor, backward, get_default_dtype, no_grad

CSV_COLUMNS = ["iter", "kl", "adv_d", "adv_g", "style", "content", "pixel", "cls_e", "cls_dac", "zrec",
               "eval_l1", "eval_ssim"]
PAIRED_COLUMNS = ["paired_pixel", "paired_content", "paired_style"]
GRAD_CLIP_NORM = 5.0


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    dataset: str = "data/spinner"
    out: str = "runs/default"
    iterations: int = 2000
    batch_size: int = 16
    lr: float = 2e-4
    beta1: float = 0.0
    beta2: float = 0.9
    seed: int = 0
    preset: str = "D"
    paired: bool = False
    grad_clip: bool = False
    log_interval: int = 50
    checkpoint_interval: int = 500
    eval_interval: int = 0
    eval_sources: int = 64
    # network
    image_size: int = 32
    base: int = 16
    z_dim: int = 256
    fc_dim: int = 0
    w_dim: int = 25
    dfnm_hidden: int = 0
    dac_hidden: int = 256
    decoder_variant: str = "dfnm_only"
    fe_widths: tuple = (8, 16, 32, 32, 32)

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 2:
            raise ValueError("iterations must be >= 0 and batch_size >= 2")
        for name in ("log_interval", "checkpoint_interval", "eval_interval"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        self.fe_widths = tuple(int(w) for w in self.fe_widths)
        self.network_spec(views=2)  # validate preset/variant early

    def network_spec(self, views: int) -> NetworkSpec:
        return NetworkSpec(image_size=self.image_size, base=self.base, z_dim=self.z_dim, views=views,
                           w_dim=self.w_dim, fc_dim=self.fc_dim, dfnm_hidden=self.dfnm_hidden,
                           dac_hidden=self.dac_hidden, decoder_variant=self.decoder_variant,
                           preset=self.preset, fe_widths=self.fe_widths)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["fe_widths"] = list(self.fe_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def _parse_value(kind, text: str):
    if kind in (bool, "bool"):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind in (int, "int"):
        return int(text)
    if kind in (float, "float"):
        return float(text)
    if kind in (tuple, "tuple"):
        return tuple(int(t) for t in text.replace(",", " ").split())
    return text


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """``key = value`` lines; ``#`` starts a comment; keys are TrainConfig fields."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = base.to_dict() if base is not None else {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(types[key], val)
    return TrainConfig(**values)


def load_config(path: str, base: TrainConfig | None = None) -> TrainConfig:
    with open(path) as fh:
        return parse_config_text(fh.read(), base)


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, list):
            v = " ".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


@dataclass
class Noise:
    eps: np.ndarray
    z_prior: np.ndarray
    psi_e: np.ndarray
    psi_g: np.ndarray


@dataclass
class StepOutputs:
    x_rec: Tensor
    x_trans: Tensor
    x_prior: Tensor
    losses: dict = field(default_factory=dict)


@dataclass
class TrainState:
    cfg: TrainConfig
    model: Model
    fe: FeatureExtractor
    opt_eg: AdamState
    opt_d: AdamState
    opt_dac: AdamState | None
    rng: np.random.Generator
    iteration: int = 0


def eg_parameters(model: Model) -> dict:
    return {f"encoder.{k}": p for k, p in model.encoder.named_parameters()} | \
           {f"decoder.{k}": p for k, p in model.decoder.named_parameters()}


def init_state(cfg: TrainConfig, views: int) -> TrainState:
    spec = cfg.network_spec(views)
    model = Model(spec, seed=cfg.seed)
    fe = FeatureExtractor(spec.fe_widths, seed=cfg.seed)

    def adam():
        return AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)

    return TrainState(cfg, model, fe, adam(), adam(), adam() if model.has_dac else None,
                      np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7A11])))


def draw_noise(rng: np.random.Generator, n: int, z_dim: int, dtype) -> Noise:
    return Noise(eps=rng.standard_normal((n, z_dim)).astype(dtype),
                 z_prior=rng.standard_normal((n, z_dim)).astype(dtype),
                 psi_e=rng.standard_normal((n, NOISE_DIM)).astype(dtype),
                 psi_g=rng.standard_normal((n, NOISE_DIM)).astype(dtype))


def param_digest(module: Module) -> str:
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def _zero(params) -> None:
    for p in params:
        p.grad = None


def _clip(params: dict, max_norm: float) -> None:
    grads = [p.grad for p in params.values() if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
    if total > max_norm:
        for g in grads:
            g *= max_norm / total


def generate(state: TrainState, batch: Batch, noise: Noise):
    """Encoder pass plus the three generator outputs, with graphs attached."""
    m = state.model
    x_a = Tensor(batch.x_a)
    enc = m.encoder(x_a, batch.y_a, noise.psi_e)
    z = reparameterize(enc, noise.eps)
    x_rec = m.decoder(z, batch.y_a, noise.psi_g)
    x_trans = m.decoder(z, batch.y_b, noise.psi_g)
    x_prior = m.decoder(Tensor(noise.z_prior), batch.y_a, noise.psi_g)
    return x_a, enc, z, StepOutputs(x_rec, x_trans, x_prior)


def d_stage(state: TrainState, batch: Batch, x_a: Tensor, z: Tensor, out: StepOutputs) -> dict:
    m, cfg = state.model, state.cfg
    D = m.disc
    D.train()
    with frozen(m.encoder, m.decoder):
        real = D(x_a, batch.y_a)
        fakes = [D(out.x_rec.detach(), batch.y_a), D(out.x_trans.detach(), batch.y_b),
                 D(out.x_prior.detach(), batch.y_a)]
        loss_d = hinge_d(real, fakes)
        d_params = dict(D.named_parameters())
        _zero(d_params.values())
        backward(loss_d)
        if cfg.grad_clip:
            _clip(d_params, GRAD_CLIP_NORM)
        adam_step(state.opt_d, d_params)
        losses = {"adv_d": loss_d.item()}
        if m.has_dac:
            loss_cls = dac_loss_cls(m.dac(z.detach()), batch.y_a)
            dac_params = dict(m.dac.named_parameters())
            _zero(dac_params.values())
            backward(loss_cls)
            if cfg.grad_clip:
                _clip(dac_params, GRAD_CLIP_NORM)
            adam_step(state.opt_dac, dac_params)
            losses["cls_dac"] = loss_cls.item()
    return losses


def g_stage(state: TrainState, batch: Batch, x_a: Tensor, enc, z: Tensor, out: StepOutputs,
            noise: Noise) -> dict:
    m, cfg = state.model, state.cfg
    frozen_mods = [m.disc] + ([m.dac] if m.has_dac else [])
    m.disc.eval()
    try:
        with frozen(*frozen_mods):
            comps = perceptual_losses(x_a, out.x_rec, state.fe)
            comps["kl"] = kl_gaussian(enc.mu, enc.logvar)
            comps["adv"] = hinge_g([m.disc(out.x_rec, batch.y_a), m.disc(out.x_trans, batch.y_b),
                                    m.disc(out.x_prior, batch.y_a)])
            if m.has_dac:
                comps["cls"] = dac_loss_E(m.dac(z))
            z_rec = m.encoder(out.x_prior, batch.y_a, noise.psi_e).mu
            comps["zrec"] = z_reconstruction(Tensor(noise.z_prior), z_rec)
            if cfg.paired:
                if not isinstance(batch, PairedBatch):
                    raise TypeError("paired mode needs a PairedBatch with target images")
                extra = perceptual_losses(Tensor(batch.x_b), out.x_trans, state.fe)
                comps.update({f"paired_{k}": v for k, v in extra.items()})
            loss = total_eg(comps, use_cls=m.has_dac)
            eg = eg_parameters(m)
            _zero(eg.values())
            backward(loss)
            if cfg.grad_clip:
                _clip(eg, GRAD_CLIP_NORM)
            adam_step(state.opt_eg, eg)
    finally:
        m.disc.train()
    names = {"adv": "adv_g", "cls": "cls_e"}
    return {names.get(k, k): v.item() for k, v in comps.items()} | {"total_eg": loss.item()}


def train_step(state: TrainState, batch: Batch, noise: Noise | None = None) -> StepOutputs:
    n = batch.x_a.shape[0]
    if np.any(batch.y_a == batch.y_b):
        raise ValueError("target view equals source view in an unpaired batch")
    if noise is None:
        noise = draw_noise(state.rng, n, state.model.spec.z_dim, get_default_dtype())
    try:
        x_a, enc, z, out = generate(state, batch, noise)
        losses = d_stage(state, batch, x_a, z, out)
        losses.update(g_stage(state, batch, x_a, enc, z, out, noise))
    except FloatingPointError as exc:
        raise TrainingDiverged(f"non-finite value at iteration {state.iteration + 1}: {exc}") from exc
    out.losses = losses
    state.iteration += 1
    return out


# checkpoints ---------------------------------------------------------------

def _adam_tensors(prefix: str, st: AdamState) -> dict:
    out = {}
    for k in sorted(st.m):
        out[f"{prefix}/m/{k}"] = st.m[k]
        out[f"{prefix}/v/{k}"] = st.v[k]
    return out


def _adam_meta(st: AdamState) -> dict:
    return {"lr": st.lr, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps, "t": st.t}


def _adam_restore(prefix: str, meta: dict, tensors: dict) -> AdamState:
    st = AdamState(**meta)
    for name, arr in tensors.items():
        if name.startswith(prefix + "/m/"):
            st.m[name[len(prefix) + 3:]] = arr.copy()
        elif name.startswith(prefix + "/v/"):
            st.v[name[len(prefix) + 3:]] = arr.copy()
    return st


def state_tables(state: TrainState) -> tuple[dict, dict]:
    tensors = dict(state.model.state_tensors())
    tensors.update({f"feature_extractor.{k}": p.data for k, p in state.fe.named_parameters()})
    tensors.update(_adam_tensors("adam/eg", state.opt_eg))
    tensors.update(_adam_tensors("adam/d", state.opt_d))
    meta = {
        "iteration": state.iteration,
        "config": state.cfg.to_dict(),
        "network": state.model.spec.to_dict(),
        "rng": state.rng.bit_generator.state,
        "adam": {"eg": _adam_meta(state.opt_eg), "d": _adam_meta(state.opt_d)},
    }
    if state.opt_dac is not None:
        tensors.update(_adam_tensors("adam/dac", state.opt_dac))
        meta["adam"]["dac"] = _adam_meta(state.opt_dac)
    return tensors, meta


def save_checkpoint(state: TrainState, path: str) -> None:
    tensors, meta = state_tables(state)
    ckpt.save(path, tensors, meta)


def load_checkpoint(path: str) -> TrainState:
    tensors, meta = ckpt.load(path)
    if meta is None or "network" not in meta:
        raise ckpt.CheckpointError(f"{path}: no training metadata")
    cfg = TrainConfig.from_dict(meta["config"])
    spec = NetworkSpec.from_dict(meta["network"])
    model = Model(spec, seed=cfg.seed)
    model.load_state(tensors)
    fe = FeatureExtractor(spec.fe_widths, seed=cfg.seed)
    fe.load_weights({k[len("feature_extractor."):]: v for k, v in tensors.items()
                     if k.startswith("feature_extractor.")})
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    adam = meta["adam"]
    return TrainState(cfg, model, fe, _adam_restore("adam/eg", adam["eg"], tensors),
                      _adam_restore("adam/d", adam["d"], tensors),
                      _adam_restore("adam/dac", adam["dac"], tensors) if "dac" in adam else None,
                      rng, int(meta["iteration"]))


def load_model(path: str) -> tuple[Model, dict]:
    """Networks only, plus the checkpoint metadata."""
    tensors, meta = ckpt.load(path)
    if meta is None or "network" not in meta:
        raise ckpt.CheckpointError(f"{path}: no network description")
    model = Model(NetworkSpec.from_dict(meta["network"]), seed=meta.get("config", {}).get("seed", 0))
    model.load_state(tensors)
    return model, meta


# evaluation ----------------------------------------------------------------

def psi_noise(seed: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Encoder and decoder Psi noise used at inference, fixed by ``seed``."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5E]))
    dt = get_default_dtype()
    return rng.standard_normal((n, NOISE_DIM)).astype(dt), rng.standard_normal((n, NOISE_DIM)).astype(dt)


def synthesize(model: Model, x: np.ndarray, y_src, y_tgt, seed: int = 0) -> np.ndarray:
    """Encode with the posterior mean and decode at ``y_tgt``."""
    psi_e, psi_g = psi_noise(seed, x.shape[0])
    with no_grad():
        mu = model.encoder(Tensor(x), y_src, psi_e).mu
        return model.decoder(mu, y_tgt, psi_g).data


def evaluate(model, store: ImageStore, sources, seed: int = 0, chunk: int = 32,
             translated_only: bool = False) -> list[dict]:
    """Score every (source record, target view) pair against the ground-truth target image.

    ``model`` is a :class:`Model` or any callable ``(x, y_src, y_tgt, seed) -> images``.
    """
    synth = model if callable(model) and not isinstance(model, Model) else \
        (lambda x, ys, yt, sd: synthesize(model, x, ys, yt, seed=sd))
    V = store.index.views
    prev = store.audit.phase
    store.audit.phase = "eval"
    rows = []
    try:
        for start in range(0, len(sources), chunk):
            recs = sources[start:start + chunk]
            x = np.stack([store.read(r.identity, r.view, "eval_source") for r in recs])
            y_src = np.array([r.view for r in recs])
            for v in range(V):
                pred = synth(x, y_src, np.full(len(recs), v), seed + start)
                for k, r in enumerate(recs):
                    if translated_only and r.view == v:
                        continue
                    gt = store.read(r.identity, v, "eval_target")
                    a, b = to_8bit_scale(pred[k]), to_8bit_scale(gt)
                    rows.append({"identity": r.identity, "source_view": r.view, "target_view": v,
                                 "l1": eval_l1(a, b), "ssim": eval_ssim(a, b)})
    finally:
        store.audit.phase = prev
    return rows


def eval_subset(index: DatasetIndex, n: int, seed: int) -> list:
    recs = index.split_records("test")
    if n and n < len(recs):
        pick = np.sort(np.random.default_rng(np.random.SeedSequence([seed, 0xE7])).choice(len(recs), n, replace=False))
        recs = [recs[i] for i in pick]
    return recs


# run -----------------------------------------------------------------------

def _fmt(v) -> str:
    return "" if v is None else format(v, ".9g") if isinstance(v, float) else str(v)


def _eval_means(model, store, recs, seed) -> tuple[float, float]:
    rows = evaluate(model, store, recs, seed=seed, translated_only=True)
    return float(np.mean([r["l1"] for r in rows])), float(np.mean([r["ssim"] for r in rows]))


def run(cfg: TrainConfig, resume: str | None = None, store: ImageStore | None = None,
        on_step=None) -> TrainState:
    """Train for ``cfg.iterations`` total iterations, writing CSV and checkpoints under ``cfg.out``."""
    os.makedirs(cfg.out, exist_ok=True)
    if not os.access(cfg.out, os.W_OK):
        raise PermissionError(f"output directory {cfg.out} is not writable")
    if store is None:
        store = ImageStore(load_directory_dataset(cfg.dataset, seed=cfg.seed))
    index = store.index
    if resume:
        state = load_checkpoint(resume)
        state.cfg = dataclasses.replace(state.cfg, iterations=cfg.iterations, out=cfg.out,
                                        log_interval=cfg.log_interval, checkpoint_interval=cfg.checkpoint_interval,
                                        eval_interval=cfg.eval_interval)
        if state.model.spec.views != index.views:
            raise ValueError(f"checkpoint has {state.model.spec.views} views, dataset {index.views}")
    else:
        state = init_state(cfg, index.views)
    cfg = state.cfg
    train_recs = index.split_records("train")
    if not train_recs:
        raise ValueError("dataset has no training records")
    eval_recs = eval_subset(index, cfg.eval_sources, cfg.seed) if cfg.eval_interval else []
    with open(os.path.join(cfg.out, "config.txt"), "w") as fh:
        fh.write(format_config(cfg))
    with open(os.path.join(cfg.out, "manifest.json"), "w") as fh:
        json.dump({"config": cfg.to_dict(), "network": state.model.spec.to_dict(), "views": index.views,
                   "resumed_from": resume}, fh, indent=2, sort_keys=True)
    columns = CSV_COLUMNS + (PAIRED_COLUMNS if cfg.paired else [])
    log_path = os.path.join(cfg.out, "metrics.csv")
    fh = open(log_path, "w", newline="")
    writer = csv.writer(fh)
    writer.writerow(columns)
    sampler = sample_paired_batch if cfg.paired else sample_unpaired_batch
    if cfg.checkpoint_interval and state.iteration == 0:
        save_checkpoint(state, os.path.join(cfg.out, "ckpt_000000.dvws"))
    if eval_recs and state.iteration == 0:
        # untrained baseline for the improvement figure
        ev_l1, ev_ssim = _eval_means(state.model, store, eval_recs, cfg.seed)
        writer.writerow([0] + [""] * (len(CSV_COLUMNS) - 3) + [_fmt(ev_l1), _fmt(ev_ssim)]
                        + ([""] * len(PAIRED_COLUMNS) if cfg.paired else []))
    try:
        while state.iteration < cfg.iterations:
            store.audit.phase = "train"
            batch = sampler(store, train_recs, state.rng, cfg.batch_size)
            out = train_step(state, batch)
            store.audit.phase = "idle"
            it = state.iteration
            if on_step is not None:
                on_step(state, batch, out)
            ev_l1 = ev_ssim = None
            if cfg.eval_interval and (it % cfg.eval_interval == 0 or it == cfg.iterations):
                ev_l1, ev_ssim = _eval_means(state.model, store, eval_recs, cfg.seed)
            if (cfg.log_interval and (it % cfg.log_interval == 0 or it == 1)) or ev_l1 is not None:
                L = out.losses
                writer.writerow([it] + [_fmt(L.get(c)) for c in CSV_COLUMNS[1:-2]]
                                + [_fmt(ev_l1), _fmt(ev_ssim)]
                                + ([_fmt(L.get(c)) for c in PAIRED_COLUMNS] if cfg.paired else []))
                fh.flush()
            if cfg.checkpoint_interval and it % cfg.checkpoint_interval == 0:
                save_checkpoint(state, os.path.join(cfg.out, f"ckpt_{it:06d}.dvws"))
    finally:
        store.audit.phase = "idle"
        fh.close()
    save_checkpoint(state, os.path.join(cfg.out, "final.dvws"))
    return state
