"""Spinner toy dataset, directory datasets, and the unpaired batch sampler."""
from __future__ import annotations

import json
import os
import re
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image

from .tensor import rng_stream

MANIFEST = "manifest.json"


@dataclass(frozen=True)
class SpinnerSpec:
    size: int = 32
    views: int = 8
    identities: int = 200
    seed: int = 0
    supersample: int = 4

    def __post_init__(self):
        if self.size < 8 or self.views < 2 or self.identities < 1 or self.supersample < 1:
            raise ValueError(f"invalid spinner spec {self}")


@dataclass(frozen=True)
class SpinnerAttributes:
    vertices: int
    radii: tuple
    phase: float
    color: tuple
    stripe_color: tuple
    stripes: int
    scale: float


def spinner_attributes(spec: SpinnerSpec, identity: int) -> SpinnerAttributes:
    if not 0 <= identity < spec.identities:
        raise ValueError(f"identity {identity} outside [0, {spec.identities})")
    rng = rng_stream(spec.seed, f"spinner/{identity}")
    n = int(rng.integers(3, 8))
    return SpinnerAttributes(
        vertices=n,
        # irregular radii keep every shape free of rotational symmetry
        radii=tuple(float(r) for r in rng.uniform(0.55, 1.0, n)),
        phase=float(rng.uniform(0, 2 * np.pi)),
        color=tuple(float(c) for c in rng.uniform(0.15, 1.0, 3)),
        stripe_color=tuple(float(c) for c in rng.uniform(0.0, 1.0, 3)),
        stripes=int(rng.integers(0, 5)),
        scale=float(rng.uniform(0.6, 0.95)),
    )


def _inside(px, py, vx, vy):
    """Even-odd point-in-polygon test, vectorised over sample points."""
    inside = np.zeros(px.shape, dtype=bool)
    n = len(vx)
    for i in range(n):
        x0, y0, x1, y1 = vx[i], vy[i], vx[(i + 1) % n], vy[(i + 1) % n]
        if y0 == y1:
            continue
        cross = ((y0 > py) != (y1 > py)) & (px < (x1 - x0) * (py - y0) / (y1 - y0) + x0)
        inside ^= cross
    return inside


BACKGROUND = (0.08, 0.08, 0.1)


def render_spinner(spec: SpinnerSpec, identity: int, view: int) -> np.ndarray:
    """(3, S, S) float32 image in [-1, 1]; the shape is rotated by ``view * 360 / V`` degrees."""
    if not 0 <= view < spec.views:
        raise ValueError(f"view {view} outside [0, {spec.views})")
    a = spinner_attributes(spec, identity)
    S, ss = spec.size, spec.supersample
    # sample points symmetric about the image centre, in units of half the image side
    t = (np.arange(S * ss) + 0.5) / ss - S / 2.0
    gx, gy = np.meshgrid(t / (S / 2.0), t / (S / 2.0))
    theta = 2 * np.pi * view / spec.views
    c, s = np.cos(theta), np.sin(theta)
    # object-frame coordinates: rotate the sample grid backwards
    ux, uy = c * gx + s * gy, -s * gx + c * gy
    ang = a.phase + 2 * np.pi * np.arange(a.vertices) / a.vertices
    r = a.scale * np.asarray(a.radii)
    mask = _inside(ux, uy, r * np.cos(ang), r * np.sin(ang))
    col = np.empty((3,) + mask.shape)
    for k in range(3):
        col[k] = BACKGROUND[k]
    fill = np.broadcast_to(np.asarray(a.color)[:, None, None], col.shape).copy()
    if a.stripes:
        band = np.sin(np.pi * (a.stripes + 1) * ux) > 0
        fill = np.where(band[None], np.asarray(a.stripe_color)[:, None, None], fill)
    col = np.where(mask[None], fill, col)
    img = col.reshape(3, S, ss, S, ss).mean(axis=(2, 4))
    return (img * 2.0 - 1.0).astype(np.float32)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """(3, H, W) in [-1, 1] -> (H, W, 3) uint8."""
    x = np.clip(np.rint((np.asarray(img, dtype=np.float64) + 1.0) * 127.5), 0, 255)
    return x.astype(np.uint8).transpose(1, 2, 0)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return (np.asarray(arr, dtype=np.float32).transpose(2, 0, 1) / 127.5 - 1.0).astype(np.float32)


def save_png(path: str, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG", optimize=False)


def load_png(path: str) -> np.ndarray:
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def generate_spinner_dataset(out: str, spec: SpinnerSpec, force: bool = False) -> int:
    """Write ``<out>/<identity>/<view>.png`` plus a manifest; returns the image count."""
    if os.path.isdir(out) and os.listdir(out) and not force:
        raise FileExistsError(f"{out} exists and is not empty (use --force to overwrite)")
    os.makedirs(out, exist_ok=True)
    width = len(str(spec.identities - 1))
    for i in range(spec.identities):
        d = os.path.join(out, f"{i:0{width}d}")
        os.makedirs(d, exist_ok=True)
        for v in range(spec.views):
            save_png(os.path.join(d, f"{v}.png"), render_spinner(spec, i, v))
    with open(os.path.join(out, MANIFEST), "w") as fh:
        json.dump({"kind": "spinner", "spec": asdict(spec), "layout": "<identity>/<view_index>.png"},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    return spec.identities * spec.views


@dataclass(frozen=True)
class Record:
    path: str
    identity: str
    view: int


@dataclass
class DatasetIndex:
    records: list
    views: int
    split: dict = field(default_factory=dict)

    @property
    def identities(self) -> list[str]:
        return sorted({r.identity for r in self.records})

    def split_records(self, name: str) -> list[Record]:
        if name not in ("train", "test", "all"):
            raise ValueError(f"unknown split {name!r}")
        if name == "all":
            return list(self.records)
        return [r for r in self.records if self.split.get(r.identity) == name]

    def split_identities(self, name: str) -> list[str]:
        return sorted({r.identity for r in self.split_records(name)})

    def record(self, identity: str, view: int) -> Record:
        for r in self.records:
            if r.identity == identity and r.view == view:
                return r
        raise KeyError(f"no record for identity {identity!r} view {view}")


def assign_split(identities, seed: int, train_fraction: float = 0.8) -> dict:
    ids = sorted(identities)
    order = rng_stream(seed, "split").permutation(len(ids))
    n_train = int(round(train_fraction * len(ids)))
    return {ids[k]: ("train" if rank < n_train else "test") for rank, k in enumerate(order)}


_VIEW_FILE = re.compile(r"^(\d+)\.png$")


def load_directory_dataset(path: str, seed: int = 0, train_fraction: float = 0.8) -> DatasetIndex:
    """Index ``<path>/<identity>/<view_index>.png``; views must be 0..V-1 for every identity."""
    if not os.path.isdir(path):
        raise FileNotFoundError(f"dataset directory {path} does not exist")
    records, per_id = [], {}
    for ident in sorted(os.listdir(path)):
        d = os.path.join(path, ident)
        if not os.path.isdir(d):
            continue
        views = []
        for fn in sorted(os.listdir(d)):
            m = _VIEW_FILE.match(fn)
            if m:
                views.append(int(m.group(1)))
                records.append(Record(os.path.join(d, fn), ident, int(m.group(1))))
        if views:
            per_id[ident] = sorted(views)
    if not records:
        raise ValueError(f"{path}: no images found in layout <identity>/<view_index>.png")
    V = max(max(v) for v in per_id.values()) + 1
    bad = [i for i, v in per_id.items() if v != list(range(V))]
    if bad:
        raise ValueError(f"{path}: identities with non-contiguous views (expected 0..{V - 1}): {bad[:10]}")
    if V < 2:
        raise ValueError(f"{path}: need at least two views, found {V}")
    records.sort(key=lambda r: (r.identity, r.view))
    return DatasetIndex(records, V, assign_split(per_id, seed, train_fraction))


class AccessAudit:
    """Log of every image read: ``(phase, role, identity, view)``."""

    def __init__(self):
        self.log: list[tuple[str, str, str, int]] = []
        self.phase = "idle"

    def record(self, role: str, identity: str, view: int) -> None:
        self.log.append((self.phase, role, identity, view))

    def count(self, phase: str | None = None, role: str | None = None) -> int:
        return sum(1 for p, r, _, _ in self.log if (phase is None or p == phase) and (role is None or r == role))

    def summary(self) -> Counter:
        return Counter((p, r) for p, r, _, _ in self.log)


class ImageStore:
    """Decoded images cached in memory; every read goes through the audit."""

    def __init__(self, index: DatasetIndex, audit: AccessAudit | None = None):
        self.index = index
        self.audit = audit or AccessAudit()
        self._by_key = {(r.identity, r.view): r for r in index.records}
        self._cache: dict = {}

    def read(self, identity: str, view: int, role: str) -> np.ndarray:
        key = (identity, view)
        if key not in self._by_key:
            raise KeyError(f"no image for identity {identity!r} view {view}")
        self.audit.record(role, identity, view)
        img = self._cache.get(key)
        if img is None:
            img = self._cache[key] = load_png(self._by_key[key].path)
        return img


@dataclass(frozen=True)
class Batch:
    """Source images with their labels and independently drawn target labels.

    There is deliberately no target-image field.
    """

    x_a: np.ndarray
    y_a: np.ndarray
    y_b: np.ndarray
    identities: tuple


@dataclass(frozen=True)
class PairedBatch(Batch):
    x_b: np.ndarray = None


def sample_target_views(rng: np.random.Generator, y_a: np.ndarray, views: int) -> np.ndarray:
    """Uniform over the ``views - 1`` labels different from each source label."""
    if views < 2:
        raise ValueError("need at least two views to pick a different target")
    off = rng.integers(1, views, size=len(y_a))
    return (np.asarray(y_a) + off) % views


def sample_unpaired_batch(store: ImageStore, records: list[Record], rng: np.random.Generator, n: int) -> Batch:
    if n < 2:
        raise ValueError(f"batch size must be at least 2, got {n}")
    picks = rng.integers(0, len(records), size=n)
    chosen = [records[i] for i in picks]
    y_a = np.array([r.view for r in chosen], dtype=np.int64)
    y_b = sample_target_views(rng, y_a, store.index.views)
    x_a = np.stack([store.read(r.identity, r.view, "source") for r in chosen])
    return Batch(x_a, y_a, y_b, tuple(r.identity for r in chosen))


def sample_paired_batch(store: ImageStore, records: list[Record], rng: np.random.Generator, n: int) -> PairedBatch:
    b = sample_unpaired_batch(store, records, rng, n)
    x_b = np.stack([store.read(i, int(v), "target") for i, v in zip(b.identities, b.y_b)])
    return PairedBatch(b.x_a, b.y_a, b.y_b, b.identities, x_b)
