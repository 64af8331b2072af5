"""Benchmark the convolution kernel lanes: compiled gather/scatter vs numpy.

Run:  python benchmarks/bench_kernels.py [--seconds 0.6]

Both lanes share the BLAS GEMM; the lanes differ in how the im2col patch
matrix is gathered and how its gradient is scattered back, which is where
the pure-numpy fallback loses time.  Outputs per-shape timings for the
full conv forward/backward composition under each lane, verifying
bit-identical results along the way.
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

import numpy as np

from diffdesk.numerics.kernels import _impl as active_lane
from diffdesk.numerics.kernels import numpy_kernels

SHAPES = [
    # (label, batch, H, W, Cin, Cout, stride)
    ("attack step 32x32", 25, 32, 32, 16, 16, 1),
    ("stem conv", 25, 32, 32, 3, 16, 1),
    ("half-res conv", 25, 16, 16, 32, 32, 1),
    ("downsample", 25, 32, 32, 16, 32, 2),
    ("single image", 1, 32, 32, 16, 16, 1),
    ("latent conv", 25, 8, 8, 32, 32, 1),
]


def conv_roundtrip(lane, x, w, stride):
    """Forward + both backward passes through one lane's gather/scatter."""
    kh, kw, cin, cout = w.shape
    n = x.shape[0]
    cols = lane.im2col(x, kh, kw, stride, 1)
    ho, wo = cols.shape[1], cols.shape[2]
    out = cols.reshape(n * ho * wo, kh * kw * cin) @ w.reshape(kh * kw * cin, cout)
    go = out  # reuse as upstream gradient; shapes match
    gw = cols.reshape(n * ho * wo, kh * kw * cin).T @ go
    gcols = (go @ w.reshape(kh * kw * cin, cout).T).reshape(n, ho, wo, kh, kw, cin)
    gx = lane.col2im_add(gcols, x.shape, stride, 1)
    return out.reshape(n, ho, wo, cout), gx, gw.reshape(w.shape)


def bench(lane, x, w, stride, seconds):
    conv_roundtrip(lane, x, w, stride)  # warmup
    t0 = time.perf_counter()
    reps = 0
    while time.perf_counter() - t0 < seconds:
        result = conv_roundtrip(lane, x, w, stride)
        reps += 1
    return (time.perf_counter() - t0) / reps, result


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seconds", type=float, default=0.6, help="time budget per measurement")
    args = parser.parse_args()

    print(f"active lane: {active_lane.LANE}")
    if active_lane is numpy_kernels:
        print("compiled extension not importable; both columns will be the numpy lane")
    rng = np.random.default_rng(0)
    header = f"{'shape':<20} {'compiled':>12} {'numpy':>12} {'speedup':>9}"
    print(header)
    print("-" * len(header))
    for label, n, h, wdt, cin, cout, stride in SHAPES:
        x = rng.standard_normal((n, h, wdt, cin))
        w = rng.standard_normal((3, 3, cin, cout))
        t_active, r_active = bench(active_lane, x, w, stride, args.seconds)
        t_numpy, r_numpy = bench(numpy_kernels, x, w, stride, args.seconds)
        for a, b in zip(r_active, r_numpy):
            if not np.array_equal(a, b):
                raise SystemExit(f"lane outputs differ on {label}")
        print(f"{label:<20} {t_active*1e3:>10.2f}ms {t_numpy*1e3:>10.2f}ms {t_numpy/t_active:>8.2f}x")
    print("(lanes verified bit-identical on every shape)")


if __name__ == "__main__":
    main()
