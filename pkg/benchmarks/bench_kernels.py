"""Compare the compiled and fallback conv3d kernels on training-relevant shapes.

Run from the repo root:

    python3 benchmarks/bench_kernels.py [--dtype float32] [--repeats 3]

Each row times forward, grad-input, and grad-weight for one shape on both
backends and prints the ratio. The shape list covers the regimes that matter
in practice: stride-2 encoder convs on large extents, stride-1 decoder convs,
and the deep-channel small-extent convs near the bottleneck where the BLAS
fallback tends to win.
"""

import argparse
import time

import numpy as np

from vgan.kernels import reference

try:
    from vgan.kernels import _convcore as compiled
except ImportError:
    compiled = None

# (label, c_in, c_out, extent, kernel, stride, padding)
SHAPES = [
    ("encoder head  4->16  32^3 k3 s2", 4, 16, 32, 3, 2, 1),
    ("encoder mid  12->16  32^3 k3 s2", 12, 16, 32, 3, 2, 1),
    ("decoder conv 16->16  32^3 k3 s1", 16, 16, 32, 3, 1, 1),
    ("decoder conv 32->16  16^3 k3 s1", 32, 16, 16, 3, 1, 1),
    ("bottleneck  128->64   4^3 k3 s1", 128, 64, 4, 3, 1, 1),
]


def _time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def bench_shape(mod, c_in, c_out, ext, k, s, p, dtype, repeats):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, c_in, ext, ext, ext)).astype(dtype)
    w = rng.standard_normal((c_out, c_in, k, k, k)).astype(dtype)
    stride = (s, s, s)
    pad = (p, p, p)
    y = mod.conv3d_forward(x, w, stride, pad)
    gy = np.ones_like(y)
    fwd = _time(lambda: mod.conv3d_forward(x, w, stride, pad), repeats)
    gin = _time(
        lambda: mod.conv3d_grad_input(w, gy, x.shape[2:], stride, pad), repeats
    )
    gw = _time(
        lambda: mod.conv3d_grad_weight(x, gy, w.shape[2:], stride, pad), repeats
    )
    return fwd, gin, gw


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--dtype", default="float32", choices=("float32", "float64"))
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()
    dtype = np.dtype(args.dtype)

    if compiled is None:
        print("compiled backend not built; run pip install -e . first")
        return

    print(f"dtype {args.dtype}, best of {args.repeats}, times in ms")
    print(f"{'shape':38s} {'pass':11s} {'fallback':>9s} {'compiled':>9s} {'ratio':>6s}")
    for label, c_in, c_out, ext, k, s, p in SHAPES:
        ref = bench_shape(reference, c_in, c_out, ext, k, s, p, dtype, args.repeats)
        cyt = bench_shape(compiled, c_in, c_out, ext, k, s, p, dtype, args.repeats)
        for name, r, c in zip(("forward", "grad_input", "grad_weight"), ref, cyt):
            print(f"{label:38s} {name:11s} {r:9.2f} {c:9.2f} {r / c:6.2f}")

    # sanity: both backends must agree on the last shape
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 4, 12, 12, 12)).astype(dtype)
    w = rng.standard_normal((6, 4, 3, 3, 3)).astype(dtype)
    a = reference.conv3d_forward(x, w, (2, 2, 2), (1, 1, 1))
    b = compiled.conv3d_forward(x, w, (2, 2, 2), (1, 1, 1))
    tol = 1e-4 if dtype == np.float32 else 1e-10
    assert np.allclose(a, b, atol=tol), "backends disagree"
    print("backends agree on a spot check")


if __name__ == "__main__":
    main()
