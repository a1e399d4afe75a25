"""Compiled vs numpy kernels, plus one training step under each backend.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--no-step]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from cdvae.kernels import _numpy

try:
    from cdvae.kernels import _ckernels
except ImportError:
    _ckernels = None

STEP = r"""
import time, tempfile
import numpy as np
from cdvae import kernels
from cdvae.data import SpinnerSpec, generate_spinner_dataset, ImageStore, load_directory_dataset, sample_unpaired_batch
from cdvae.trainer import TrainConfig, init_state, train_step
d = tempfile.mkdtemp()
generate_spinner_dataset(d, SpinnerSpec(size=32, views=8, identities=8))
store = ImageStore(load_directory_dataset(d))
cfg = TrainConfig(dataset=d, out=d, base=4, z_dim=64, fc_dim=128, dac_hidden=64)
st = init_state(cfg, 8)
rng = np.random.default_rng(0)
batches = [sample_unpaired_batch(store, store.index.records, rng, 16) for _ in range(4)]
train_step(st, batches[0])
t = time.perf_counter()
for b in batches[1:]:
    train_step(st, b)
print(kernels.BACKEND, (time.perf_counter() - t) / 3)
"""


def cases(rng):
    x = rng.standard_normal((16, 32, 16, 16)).astype(np.float32)
    cols = rng.standard_normal((32 * 9, 16 * 16 * 16)).astype(np.float32)
    img = rng.standard_normal((16, 64, 8, 8)).astype(np.float32)
    px = rng.uniform(-1, 8, (16, 9, 8, 8)).astype(np.float32)
    py = rng.uniform(-1, 8, (16, 9, 8, 8)).astype(np.float32)
    g = rng.standard_normal((16, 64, 9, 8, 8)).astype(np.float32)
    return {
        "im2col 16x32x16x16 k3": lambda m: m.im2col(x, 3, 3, 1, 1),
        "col2im 16x32x16x16 k3": lambda m: m.col2im(cols, x.shape, 3, 3, 1, 1),
        "bilinear fwd 16x64x8x8 K9": lambda m: m.bilinear_forward(img, px, py),
        "bilinear bwd 16x64x8x8 K9": lambda m: m.bilinear_backward(img, px, py, g),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--no-step", action="store_true")
    args = ap.parse_args()
    impls = [("numpy", _numpy)] + ([("cython", _ckernels)] if _ckernels else [])
    print(f"{'kernel':28s}" + "".join(f"{n:>12s}" for n, _ in impls) + "   speedup")
    for name, fn in cases(np.random.default_rng(0)).items():
        ms = [min(timeit.repeat(lambda: fn(m), number=1, repeat=args.repeat)) * 1e3 for _, m in impls]
        speed = f"{ms[0] / ms[1]:8.1f}x" if len(ms) > 1 else ""
        print(f"{name:28s}" + "".join(f"{t:10.2f}ms" for t in ms) + "  " + speed)
    if args.no_step:
        return
    print("\ntraining step (preset D, batch 16, 32x32, base 4), seconds:")
    for backend in ["python"] + (["cython"] if _ckernels else []):
        env = dict(os.environ, CDVAE_KERNELS=backend)
        out = subprocess.run([sys.executable, "-c", STEP], env=env, capture_output=True, text=True, check=True)
        print("  " + out.stdout.strip())


if __name__ == "__main__":
    main()
