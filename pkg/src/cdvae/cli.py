"""``cdvae`` command line: gen-data, train, synthesize, interpolate, dump-flows, eval.

Exit status: 0 success, 2 usage error, 1 runtime error.
"""
from __future__ import annotations

import argparse
import colorsys
import csv
import json
import os
import sys

import numpy as np
from PIL import Image, ImageDraw

from . import checkpoint as ckpt
from .cdm import label_matrix
from .data import (ImageStore, SpinnerSpec, generate_spinner_dataset, load_directory_dataset, load_png,
                   to_uint8)
from .networks import PRESETS, Model
from .tensor import Tensor, no_grad
from .trainer import TrainConfig, evaluate, load_config, load_model, psi_noise, run, synthesize

FID_NOTE = "FID: not implemented (requires external pre-trained classifier)"
LABEL_BAND = 10


class UsageError(Exception):
    pass


# helpers --------------------------------------------------------------------

def _parse_views(text: str, V: int) -> list[int]:
    if text == "all":
        return list(range(V))
    try:
        views = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"--views must be 'all' or a comma list of integers, got {text!r}")
    bad = [v for v in views if not 0 <= v < V]
    if bad or not views:
        raise UsageError(f"view indices {bad or text} outside [0, {V})")
    return views


def _load_input(args, V: int) -> tuple[np.ndarray, int]:
    """``--input`` is a PNG path (needs --source-view) or ``identity/view`` (needs --dataset)."""
    src = args.input
    if os.path.isfile(src):
        if args.source_view is None:
            raise UsageError("--source-view is required when --input is an image file")
        img, view = load_png(src), args.source_view
    else:
        if not args.dataset or "/" not in src:
            raise UsageError(f"--input {src!r} is neither an image file nor identity/view with --dataset")
        ident, view_s = src.rsplit("/", 1)
        index = load_directory_dataset(args.dataset)
        view = int(view_s)
        img = load_png(index.record(ident, view).path)
    if not 0 <= view < V:
        raise UsageError(f"source view {view} outside [0, {V})")
    return img[None], view


def _grid(cells: list[np.ndarray], labels: list[str]) -> Image.Image:
    h, w = cells[0].shape[1:]
    canvas = Image.new("RGB", (w * len(cells), h + LABEL_BAND), (0, 0, 0))
    draw = ImageDraw.Draw(canvas)
    for i, (cell, lab) in enumerate(zip(cells, labels)):
        canvas.paste(Image.fromarray(to_uint8(cell), mode="RGB"), (i * w, LABEL_BAND))
        draw.text((i * w + 1, 0), lab, fill=(255, 255, 255))
    return canvas


def _save(img: Image.Image, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    img.save(path, format="PNG", optimize=False)


def _model(path: str) -> Model:
    model, _ = load_model(path)
    model.eval()
    return model


def interpolation_frames(model: Model, x: np.ndarray, y_src: int, v0: int, v1: int, steps: int,
                         on: str, seed: int) -> list[np.ndarray]:
    """Decoded frames for t = 0, 1/(steps-1), ..., 1; each frame is decoded on its own."""
    if steps < 2:
        raise UsageError(f"--steps must be at least 2, got {steps}")
    V = model.spec.views
    psi_e, psi_g = psi_noise(seed, 1)
    if on == "w" and not model.spec.wiring["use_cdm"]:
        raise UsageError("interpolation on W needs a preset with CDM (B-F)")
    frames = []
    with no_grad():
        mu = model.encoder(Tensor(x), [y_src], psi_e).mu
        if on == "w":
            wa = model.decoder.cdm.filters([v0], psi_g)
            wb = model.decoder.cdm.filters([v1], psi_g)
        ya, yb = label_matrix([v0], V), label_matrix([v1], V)
        for k in range(steps):
            t = k / (steps - 1)
            if on == "w":
                filt = tuple(Tensor((1.0 - t) * a.data + t * b.data) for a, b in zip(wa, wb))
                frames.append(model.decoder(mu, [v0 if t < 0.5 else v1], psi_g, filters=filt).data[0])
            else:
                frames.append(model.decoder(mu, (1.0 - t) * ya + t * yb, psi_g).data[0])
    return frames


def _heat(a: np.ndarray, scale: float) -> np.ndarray:
    """Signed map -> RGB: blue negative, white zero, red positive."""
    t = np.clip(a / scale, -1, 1) if scale > 0 else np.zeros_like(a)
    r = np.where(t > 0, 1.0, 1.0 + t)
    b = np.where(t < 0, 1.0, 1.0 - t)
    g = 1.0 - np.abs(t)
    return (np.stack([r, g, b], -1) * 255).round().astype(np.uint8)


def _wheel(dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Mean flow over the 9 groups: hue = direction, value = magnitude."""
    mx, my = dx.mean(0), dy.mean(0)
    mag = np.hypot(mx, my)
    top = mag.max()
    ang = (np.arctan2(my, mx) / (2 * np.pi)) % 1.0
    out = np.zeros(mx.shape + (3,), dtype=np.uint8)
    for i in range(mx.shape[0]):
        for j in range(mx.shape[1]):
            v = mag[i, j] / top if top > 0 else 0.0
            out[i, j] = [round(255 * c) for c in colorsys.hsv_to_rgb(ang[i, j], 1.0, v)]
    return out


def flow_cosine(e_dx, e_dy, g_dx, g_dy) -> float:
    """Mean cosine between E and G flow vectors over groups and positions (zero vectors skipped)."""
    dot = e_dx * g_dx + e_dy * g_dy
    norm = np.hypot(e_dx, e_dy) * np.hypot(g_dx, g_dy)
    ok = norm > 0
    return float(np.mean(dot[ok] / norm[ok])) if ok.any() else float("nan")


# commands -------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = SpinnerSpec(size=args.size, views=args.views, identities=args.identities, seed=args.seed)
    n = generate_spinner_dataset(args.out, spec, force=args.force)
    print(f"wrote {n} images to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else TrainConfig()
    over = {"preset": args.preset}
    if args.paired:
        over["paired"] = True
    for key in ("dataset", "iterations", "seed"):
        if getattr(args, key) is not None:
            over[key] = getattr(args, key)
    out_root = args.out or cfg.out
    over["out"] = os.path.join(out_root, f"preset_{args.preset}")
    cfg = TrainConfig(**(cfg.to_dict() | over))
    state = run(cfg)
    print(f"trained {state.iteration} iterations; outputs in {cfg.out}")
    return 0


def cmd_synthesize(args) -> int:
    model = _model(args.checkpoint)
    V = model.spec.views
    views = _parse_views(args.views, V)
    x, src = _load_input(args, V)
    cells, labels = [x[0]], [f"src {src}"]
    for v in views:
        cells.append(synthesize(model, x, [src], [v], seed=args.seed)[0])
        labels.append(f"v{v}")
    _save(_grid(cells, labels), args.out)
    print(f"wrote {len(cells)}-cell grid to {args.out}")
    return 0


def cmd_interpolate(args) -> int:
    model = _model(args.checkpoint)
    V = model.spec.views
    for v in (args.from_view, args.to_view):
        if not 0 <= v < V:
            raise UsageError(f"view {v} outside [0, {V})")
    x, src = _load_input(args, V)
    frames = interpolation_frames(model, x, src, args.from_view, args.to_view, args.steps, args.on, args.seed)
    labels = [f"t={k / (args.steps - 1):.2f}" for k in range(args.steps)]
    _save(_grid(frames, labels), args.out)
    with open(os.path.splitext(args.out)[0] + "_note.txt", "w") as fh:
        fh.write(FID_NOTE + "\n")
    print(f"wrote {args.steps} frames to {args.out}")
    print(FID_NOTE)
    return 0


def cmd_dump_flows(args) -> int:
    model = _model(args.checkpoint)
    if not model.spec.wiring["use_cdm"]:
        raise RuntimeError("no CDM present (preset A checkpoint)")
    V = model.spec.views
    if not 0 <= args.target_view < V:
        raise UsageError(f"target view {args.target_view} outside [0, {V})")
    x, src = _load_input(args, V)
    psi_e, psi_g = psi_noise(args.seed, 1)
    with no_grad():
        enc = model.encoder(Tensor(x), [src], psi_e)
        _, g_cdm = model.decoder(enc.mu, [args.target_view], psi_g, return_cdm=True)
    flows = {"E": enc.cdm, "G": g_cdm}
    os.makedirs(args.out, exist_ok=True)
    raw = {}
    for net, f in flows.items():
        dx, dy = f.dx.data[0].astype(np.float32), f.dy.data[0].astype(np.float32)
        raw[f"{net}/dx"], raw[f"{net}/dy"] = dx, dy
        scale = float(max(np.abs(dx).max(), np.abs(dy).max()))
        for k in range(dx.shape[0]):
            Image.fromarray(_heat(dx[k], scale), "RGB").save(os.path.join(args.out, f"{net}_dx_{k}.png"))
            Image.fromarray(_heat(dy[k], scale), "RGB").save(os.path.join(args.out, f"{net}_dy_{k}.png"))
        Image.fromarray(_wheel(dx, dy), "RGB").save(os.path.join(args.out, f"{net}_wheel.png"))
    ckpt.save(os.path.join(args.out, "flows.dvws"), raw,
              {"source_view": src, "target_view": args.target_view, "seed": args.seed})
    report = {"source_view": src, "target_view": args.target_view}
    if src == args.target_view:
        report["mean_cosine_E_vs_G"] = flow_cosine(raw["E/dx"], raw["E/dy"], raw["G/dx"], raw["G/dy"])
        print(f"mean cosine of E-flow vs G-flow: {report['mean_cosine_E_vs_G']:.4f}")
    with open(os.path.join(args.out, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    print(f"wrote flows to {args.out}")
    return 0


def cmd_eval(args) -> int:
    model = _model(args.checkpoint)
    index = load_directory_dataset(args.dataset, seed=args.split_seed)
    if index.views != model.spec.views:
        raise RuntimeError(f"dataset has {index.views} views, checkpoint expects {model.spec.views}")
    store = ImageStore(index)
    sources = index.split_records(args.split)
    if args.max_sources:
        sources = sources[:args.max_sources]
    if not sources:
        raise RuntimeError(f"split {args.split!r} is empty")
    rows = evaluate(model, store, sources, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "per_view.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["identity", "source_view", "target_view", "l1", "ssim"])
        for r in rows:
            w.writerow([r["identity"], r["source_view"], r["target_view"], f"{r['l1']:.9g}", f"{r['ssim']:.9g}"])
    with open(os.path.join(args.out, "aggregate.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["target_view", "pairs", "l1", "ssim"])
        for v in range(index.views):
            sel = [r for r in rows if r["target_view"] == v]
            w.writerow([v, len(sel), f"{np.mean([r['l1'] for r in sel]):.9g}",
                        f"{np.mean([r['ssim'] for r in sel]):.9g}"])
        trans = [r for r in rows if r["target_view"] != r["source_view"]]
        for name, sel in (("translated", trans), ("all", rows)):
            w.writerow([name, len(sel), f"{np.mean([r['l1'] for r in sel]):.9g}",
                        f"{np.mean([r['ssim'] for r in sel]):.9g}"])
        w.writerow(["fid", "", FID_NOTE, ""])
    l1 = np.mean([r["l1"] for r in trans]) if trans else float("nan")
    ss = np.mean([r["ssim"] for r in trans]) if trans else float("nan")
    print(f"view-translated L1 {l1:.3f}  SSIM {ss:.4f}  ({len(rows)} rows)")
    print(FID_NOTE)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cdvae", description="Conditional deformable view translation")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render the spinner toy dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--views", type=int, default=8)
    g.add_argument("--identities", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one ablation preset")
    t.add_argument("--config")
    t.add_argument("--preset", default="D", choices=sorted(PRESETS))
    t.add_argument("--paired", action="store_true")
    t.add_argument("--dataset")
    t.add_argument("--out")
    t.add_argument("--iterations", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    def inputs(sp):
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--input", required=True, help="PNG path or identity/view (with --dataset)")
        sp.add_argument("--source-view", type=int)
        sp.add_argument("--dataset")
        sp.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("synthesize", help="grid of the source and its translations")
    inputs(s)
    s.add_argument("--views", default="all")
    s.add_argument("--out", default="synthesis.png")
    s.set_defaults(func=cmd_synthesize)

    i = sub.add_parser("interpolate", help="frames between two target views")
    inputs(i)
    i.add_argument("--from-view", type=int, required=True)
    i.add_argument("--to-view", type=int, required=True)
    i.add_argument("--steps", type=int, default=5)
    i.add_argument("--on", choices=("w", "y"), default="w")
    i.add_argument("--out", default="interpolation.png")
    i.set_defaults(func=cmd_interpolate)

    d = sub.add_parser("dump-flows", help="visualise the CDM offsets of E and G")
    inputs(d)
    d.add_argument("--target-view", type=int, required=True)
    d.add_argument("--out", default="flows")
    d.set_defaults(func=cmd_dump_flows)

    e = sub.add_parser("eval", help="L1/SSIM of translations against ground truth")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", default="test", choices=("train", "test", "all"))
    e.add_argument("--split-seed", type=int, default=0, help="seed of the 80/20 identity split")
    e.add_argument("--max-sources", type=int, default=0)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default="eval")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (OSError, ValueError, KeyError, RuntimeError, ckpt.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
