#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallback.

Times the convolution kernels on representative layer shapes from the
bundled backbone, then a full simulator run of the backbone under each
backend (in subprocesses so the NCPKIT_KERNELS env flag does the
selection exactly as it would for a user).

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from ncpkit import kernels  # noqa: E402

# (label, kind, ic, oc, k, stride, ih, iw) -- the backbone's hot shapes
SHAPES = [
    ("stem conv3x3 s2", "conv", 3, 8, 3, 2, 256, 256),
    ("conv1x1 8->8 @128", "conv", 8, 8, 1, 1, 128, 128),
    ("conv1x1 32->32 @64", "conv", 32, 32, 1, 1, 64, 64),
    ("conv1x1 128->128 @32", "conv", 128, 128, 1, 1, 32, 32),
    ("conv1x1 192->512 @16", "conv", 192, 512, 1, 1, 16, 16),
    ("dwconv 8 @128", "dw", 8, 8, 3, 1, 128, 128),
    ("dwconv 128 @32", "dw", 128, 128, 3, 1, 32, 32),
    ("dwconv 192 @16", "dw", 192, 192, 3, 1, 16, 16),
]


def time_call(fn, repeat):
    fn()  # warm up (jit compile, caches)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    impls = ["numpy"] + (["numba"] if kernels.backend() == "numba" else [])
    print(f"{'shape':<24} " + " ".join(f"{i:>12}" for i in impls) + "  speedup")
    for label, kind, ic, oc, k, stride, ih, iw in SHAPES:
        x = rng.integers(-128, 128, size=(ic, ih, iw)).astype(np.int8)
        scale = rng.uniform(0.01, 0.1, oc).astype(np.float32)
        bias = rng.uniform(-1, 1, oc).astype(np.float32)
        times = {}
        for impl in impls:
            if kind == "conv":
                w = rng.integers(-128, 128, size=(oc, ic, k, k)).astype(np.int8)
                fn = lambda: kernels.conv2d(x, w, stride, scale, bias,
                                            True, True, impl=impl)
            else:
                w = rng.integers(-128, 128, size=(ic, 3, 3)).astype(np.int8)
                fn = lambda: kernels.dwconv2d(x, w, stride, scale, bias,
                                              True, True, impl=impl)
            times[impl] = time_call(fn, repeat)
        row = " ".join(f"{times[i] * 1e3:>10.2f}ms" for i in impls)
        speed = (f"{times['numpy'] / times['numba']:>7.1f}x"
                 if "numba" in times else "      -")
        print(f"{label:<24} {row} {speed}")


_E2E_SNIPPET = """
import time
from ncpkit.blocks import default_backbone_config, random_model
from ncpkit.compiler import compile_graph
from ncpkit import harness
from ncpkit.kernels import backend
cfg = default_backbone_config()
res = compile_graph(random_model(0, cfg))
inp = harness.random_input(0, cfg.input)
harness.execute(res, inp)  # warm up
t0 = time.perf_counter()
harness.execute(res, inp)
print(f"{backend()}: full backbone simulation {time.perf_counter()-t0:.3f}s")
"""


def bench_end_to_end():
    for choice in ("numpy", "numba"):
        env = dict(os.environ, NCPKIT_KERNELS=choice,
                   PYTHONPATH=os.path.join(os.path.dirname(__file__), "..", "src"))
        try:
            out = subprocess.run([sys.executable, "-c", _E2E_SNIPPET], env=env,
                                 capture_output=True, text=True, check=True)
            print(out.stdout.strip())
        except subprocess.CalledProcessError as exc:
            print(f"{choice}: failed ({exc.stderr.strip().splitlines()[-1]})")


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args()
    print(f"active backend: {kernels.backend()}\n")
    bench_kernels(args.repeat)
    print()
    bench_end_to_end()


if __name__ == "__main__":
    main()
