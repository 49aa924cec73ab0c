"""Compare the numba and numpy backends of the hot kernels.

Run with ``python3 benchmarks/bench_kernels.py``. Each kernel is timed on both
backends after a warm-up call (so numba compile time is excluded) and the
outputs are checked to agree.
"""
import argparse
import time

import numpy as np

from frappe_kit import _accel
from frappe_kit.kernels import kl_bernoulli_rows, mmd2_raw


def best_of(fn, repeat):
    fn()  # warm-up / JIT
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def cases(n, rng):
    p = rng.random(n)
    q = rng.random(n // 2) * 0.8 + 0.1
    zb = rng.normal(size=n) * 3
    zf = zb + rng.normal(size=n) * 0.5
    small = rng.random(min(n, 2000))
    return [
        ("mmd2 series", lambda b: mmd2_raw(p, q, 0.5, method="series", backend=b)),
        ("mmd2 pairwise", lambda b: mmd2_raw(small, small[::-1] * 0.9, 0.5, method="pairwise", backend=b)),
        ("mmd2 laplace", lambda b: mmd2_raw(small, small * 0.9, 0.5, kernel="laplace", backend=b)),
        ("kl rows", lambda b: kl_bernoulli_rows(zb, zf, backend=b)),
    ]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--n", type=int, default=12_000)
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<16}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}  max|diff|")
    for name, fn in cases(args.n, rng):
        t_np, out_np = best_of(lambda: fn("numpy"), args.repeat)
        t_nb, out_nb = best_of(lambda: fn("numba"), args.repeat)
        diff = max(float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) for a, b in zip(out_np, out_nb))
        print(f"{name:<16}{t_np * 1e3:>10.3f}{t_nb * 1e3:>10.3f}{t_np / t_nb:>8.1f}x  {diff:.1e}")


if __name__ == "__main__":
    main()
