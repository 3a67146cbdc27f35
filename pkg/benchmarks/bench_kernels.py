"""Time the compiled kernels against the numpy fallback.

Usage::

    python3 benchmarks/bench_kernels.py [--size 384] [--repeat 5] [--pipeline]

Each kernel runs on inputs shaped like one 384 x 384 registration call. With
``--pipeline`` a full ``register_pair`` is also timed under each backend (in a
subprocess, since the backend is fixed at import).
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np
from scipy.ndimage import gaussian_filter

from slicealign._core import _pykernels as py

try:
    from slicealign._core import _ckernels as cy
except ImportError:
    cy = None

PIPELINE = """
import time
from slicealign.phantom import gen_phantom, PhantomConfig
from slicealign.image import normalize_intensity
from slicealign.registration import register_pair
c = gen_phantom(0, PhantomConfig(size={size}))
k, j = c.gt_correspondence[0]
f = normalize_intensity(c.lge[k])
ms = [normalize_intensity(c.t1m[j]), normalize_intensity(c.t2m[j])]
t0 = time.perf_counter()
register_pair(f, ms)
print(time.perf_counter() - t0)
"""


def cases(size: int, rng):
    n = size * size
    img = rng.random((size, size))
    u = gaussian_filter(rng.normal(size=(size, size, 2)), (8, 8, 0)) * 20
    mat = np.array([[0.99, 0.03, 1.5], [-0.02, 1.01, -0.8]])
    xs, ys = rng.uniform(-2, size + 1, n), rng.uniform(-2, size + 1, n)
    fb = rng.integers(0, 32, n)
    mv = rng.random(n)
    table = rng.normal(size=(32, 32))
    return {
        "sample_bilinear": lambda m: m.sample_bilinear(img, xs, ys, False),
        "affine_sample": lambda m: m.affine_sample(img, mat, (size, size)),
        "joint_histogram": lambda m: m.joint_histogram(fb, mv, 32, True),
        "mi_gradient": lambda m: m.mi_gradient(fb, mv, 32, table),
        "sample_field": lambda m: m.sample_field(u, xs, ys),
        "square_field(6)": lambda m: m.square_field(u, 6),
        "warp_field_affine": lambda m: m.warp_field_affine(img, u, mat),
    }


def best_of(fn, repeat: int) -> float:
    fn()  # warm-up
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def pipeline_time(size: int, pure: bool) -> float:
    env = dict(os.environ)
    env.pop("SLICEALIGN_PURE_PYTHON", None)
    if pure:
        env["SLICEALIGN_PURE_PYTHON"] = "1"
    out = subprocess.run([sys.executable, "-c", PIPELINE.format(size=size)], env=env,
                         capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=384)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--pipeline", action="store_true", help="also time register_pair under each backend")
    args = ap.parse_args(argv)

    if cy is None:
        print("compiled extension not built; only the fallback can be timed", file=sys.stderr)
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for name, fn in cases(args.size, rng).items():
        tp = best_of(lambda: fn(py), args.repeat) * 1e3
        if cy is None:
            print(f"{name:<20}{tp:>12.2f}{'-':>12}{'-':>10}")
            continue
        tc = best_of(lambda: fn(cy), args.repeat) * 1e3
        print(f"{name:<20}{tp:>12.2f}{tc:>12.2f}{tp / tc:>9.1f}x")

    if args.pipeline:
        tp = pipeline_time(args.size, True)
        line = f"{'register_pair':<20}{tp * 1e3:>12.0f}"
        if cy is not None:
            tc = pipeline_time(args.size, False)
            line += f"{tc * 1e3:>12.0f}{tp / tc:>9.1f}x"
        print(line)
    return 0


if __name__ == "__main__":
    sys.exit(main())
