"""Timing comparison of the numba and numpy kernel backends.

Shapes mirror what the encoder actually sees at the desk-scale settings
(64x64 input, base width 8, depth 4) plus one heavier layer. Each op is
warmed up first so numba's compile time is not billed to the measurement;
reported numbers are best-of-5 wall times.

Run: python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from gazeadapt import kernels

CASES = [
    # (label, n, cin, cout, hw, stride)
    ("enc0 64x64", 8, 8, 8, 64, 1),
    ("enc1 32x32", 8, 16, 16, 32, 1),
    ("enc2 16x16", 8, 32, 32, 16, 1),
    ("bottleneck 4x4", 8, 128, 128, 4, 1),
    ("wide 32x32", 8, 32, 64, 32, 1),
    ("strided 64x64", 8, 8, 16, 64, 2),
]


def best_of(fn, repeats):
    fn()  # warmup (numba JIT, caches)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_case(label, n, cin, cout, hw, stride, repeats):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(n, cin, hw, hw))
    w = rng.normal(size=(cout, cin, 3, 3))
    oh = hw // stride
    dy = rng.normal(size=(n, cout, oh, oh))
    rows = []
    for op, make in [
        ("forward", lambda: kernels.conv2d(x, w, stride=stride)),
        ("input-grad", lambda: kernels.conv2d_input_grad(dy, w, (hw, hw), stride=stride)),
        ("weight-grad", lambda: kernels.conv2d_weight_grad(x, dy, (3, 3), stride=stride)),
    ]:
        per_backend = {}
        for backend in ("numpy", "numba"):
            with kernels.backend(backend):
                per_backend[backend] = best_of(make, repeats)
        rows.append((label, op, per_backend["numpy"], per_backend["numba"]))
    return rows


def bench_splat(repeats):
    rng = np.random.default_rng(1)
    centers = rng.uniform(0, 63, size=(20, 2))
    rows = []
    for backend in ("numpy", "numba"):
        with kernels.backend(backend):
            t = best_of(lambda: kernels.splat_gaussians(centers, 3.0, 64, 64), repeats)
        rows.append(t)
    return [("splat 20x 64x64", "forward", rows[0], rows[1])]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    all_rows = []
    for case in CASES:
        all_rows.extend(bench_case(*case, repeats=args.repeats))
    all_rows.extend(bench_splat(args.repeats))

    header = f"{'case':18s} {'op':12s} {'numpy (ms)':>11s} {'numba (ms)':>11s} {'numba speedup':>14s}"
    print(header)
    print("-" * len(header))
    for label, op, t_np, t_nb in all_rows:
        print(f"{label:18s} {op:12s} {t_np * 1e3:11.3f} {t_nb * 1e3:11.3f} "
              f"{t_np / t_nb:13.2f}x")
    geo = np.exp(np.mean([np.log(t_np / t_nb) for _, _, t_np, t_nb in all_rows]))
    print("-" * len(header))
    print(f"geometric-mean numba speedup: {geo:.2f}x "
          f"(values < 1 mean the BLAS-backed numpy path wins)")


if __name__ == "__main__":
    main()
