"""Time the numba kernel set against the pure numpy fallback.

Runs every hot kernel on shapes matching a default desk-scale training
step (batch 32 of 1x32x32 images through two conv stages, a 400x50
latent block for the gram kernels), checks both implementations agree,
and prints a per-kernel timing table.

Usage:
    python benchmarks/bench_backends.py [--repeats N]
"""

import argparse
import time

import numpy as np

from deepcoder.kernels import _numpy_impl

try:
    from deepcoder.kernels import _numba_impl
except ImportError:
    _numba_impl = None


def bench_cases(rng):
    """Yield (name, fn_name, args) for every kernel at training shapes."""
    x1 = rng.standard_normal((32, 1, 32, 32))
    w1 = rng.standard_normal((16, 1, 3, 3)) * 0.1
    x2 = rng.standard_normal((32, 16, 16, 16))
    w2 = rng.standard_normal((8, 16, 3, 3)) * 0.1
    g2 = rng.standard_normal((32, 8, 16, 16))
    xp = rng.standard_normal((32, 16, 32, 32))
    gp = rng.standard_normal((32, 16, 16, 16))
    _, idx = _numpy_impl.maxpool_forward(xp, 2)
    a = rng.standard_normal((400, 50))
    ls = np.exp(rng.standard_normal(50) * 0.2)
    kmat = _numpy_impl.rbf_forward(a, a, 1.0, ls)
    gk = rng.standard_normal((400, 400))

    yield "conv2d fw  1->16ch 32px", "conv2d_forward", (x1, w1, 1, 1)
    yield "conv2d fw 16-> 8ch 16px", "conv2d_forward", (x2, w2, 1, 1)
    yield "conv2d bw input", "conv2d_backward_input", (g2, w2, 1, 1, 16, 16)
    yield "conv2d bw kernels", "conv2d_backward_kernels", (g2, x2, 1, 1, 3)
    yield "maxpool fw 32px", "maxpool_forward", (xp, 2)
    yield "maxpool bw 32px", "maxpool_backward", (gp, idx, 2, 32, 32)
    yield "rbf fw 400x400x50", "rbf_forward", (a, a, 1.0, ls)
    yield "rbf bw 400x400x50", "rbf_backward", (gk, kmat, a, a, ls)


def best_of(fn, args, repeats):
    """Minimum wall time over repeats; min is robust to scheduler noise."""
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def max_abs_diff(got, want):
    if isinstance(got, tuple):
        return max(max_abs_diff(g, w) for g, w in zip(got, want))
    return float(np.max(np.abs(np.asarray(got) - np.asarray(want))))


def main():
    parser = argparse.ArgumentParser(
        description="kernel timings: numba vs numpy backend")
    parser.add_argument("--repeats", type=int, default=5,
                        help="timed repetitions per kernel (default 5)")
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    rows = []
    for name, fn_name, call_args in bench_cases(rng):
        np_fn = getattr(_numpy_impl, fn_name)
        ref = np_fn(*call_args)
        t_np = best_of(np_fn, call_args, args.repeats)
        if _numba_impl is None:
            rows.append((name, t_np, None, None))
            continue
        nb_fn = getattr(_numba_impl, fn_name)
        got = nb_fn(*call_args)  # first call also compiles
        diff = max_abs_diff(got, ref)
        t_nb = best_of(nb_fn, call_args, args.repeats)
        rows.append((name, t_np, t_nb, diff))

    print(f"{'kernel':<26} {'numpy ms':>10} {'numba ms':>10} "
          f"{'speedup':>8} {'max diff':>10}")
    for name, t_np, t_nb, diff in rows:
        if t_nb is None:
            print(f"{name:<26} {t_np * 1e3:>10.3f} {'n/a':>10} "
                  f"{'n/a':>8} {'n/a':>10}")
        else:
            print(f"{name:<26} {t_np * 1e3:>10.3f} {t_nb * 1e3:>10.3f} "
                  f"{t_np / t_nb:>7.2f}x {diff:>10.2e}")
    if _numba_impl is None:
        print("numba not importable: numpy fallback timings only")


if __name__ == "__main__":
    main()
