"""Compiled kernels against the numpy fallback.

Times each hot kernel on training-sized inputs, checks that both backends
agree, then times whole training steps with either backend (each in its own
process, since the backend is fixed at import).

    python benchmarks/bench_kernels.py [--repeat N] [--steps N]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from pdcreid import kernels

STEP_SCRIPT = """
import time
from pdcreid import checks
from pdcreid.kernels import BACKEND
from pdcreid.train import Trainer
from pdcreid.model import PdcModel
cfg = checks.toy_train_config("FullPDC", batch_size=16, feature_dim=256)
ts = checks._one_identity_trainset("FullPDC")
tr = Trainer(cfg, ts, PdcModel(cfg.model_config(4), seed=0))
tr.step()
t0 = time.perf_counter()
for _ in range({steps}):
    tr.step()
print(BACKEND, (time.perf_counter() - t0) / {steps})
"""


def cases(rng):
    x = rng.normal(size=(16, 16, 32, 16))
    cols = kernels.python_backend.im2col(x, 3, 3, 1, 1, 1, 1)
    pooled, idx = kernels.python_backend.maxpool_forward(x, 3, 2, 1)
    img = rng.normal(size=(3, 32, 16))
    px = rng.uniform(-1, 16, 32 * 16)
    py = rng.uniform(-1, 32, 32 * 16)
    g = rng.normal(size=(3, px.size))
    return {
        "im2col 3x3 [16,16,32,16]": lambda b: b.im2col(x, 3, 3, 1, 1, 1, 1),
        "col2im 3x3 [16,16,32,16]": lambda b: b.col2im(cols, x.shape, 3, 3, 1, 1, 1, 1),
        "maxpool fwd 3/2": lambda b: b.maxpool_forward(x, 3, 2, 1),
        "maxpool bwd 3/2": lambda b: b.maxpool_backward(pooled, idx, x.shape),
        "bilinear fwd 32x16": lambda b: b.bilinear_forward(img, px, py),
        "bilinear bwd 32x16": lambda b: b.bilinear_backward(img, px, py, g),
    }


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-12, atol=1e-12)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--steps", type=int, default=5)
    args = ap.parse_args()
    py, cy = kernels.python_backend, kernels.compiled_backend
    if cy is None:
        sys.exit("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")
    print(f"{'kernel':28s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s}  agree")
    for name, fn in cases(np.random.default_rng(0)).items():
        tp = min(timeit.repeat(lambda: fn(py), number=1, repeat=args.repeat)) * 1e3
        tc = min(timeit.repeat(lambda: fn(cy), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:28s} {tp:10.3f} {tc:12.3f} {tp / tc:8.1f}x  {same(fn(py), fn(cy))}")
    print()
    for backend in ("python", "compiled"):
        env = dict(os.environ)
        if backend == "python":
            env["PDC_KERNELS"] = "python"
        else:
            env.pop("PDC_KERNELS", None)
        out = subprocess.run([sys.executable, "-c", STEP_SCRIPT.format(steps=args.steps)], env=env,
                             capture_output=True, text=True, check=True).stdout.split()
        print(f"FullPDC train step (batch 16), {out[0]} kernels: {float(out[1]) * 1e3:.1f} ms")


if __name__ == "__main__":
    main()
