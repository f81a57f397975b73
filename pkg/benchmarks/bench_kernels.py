"""Time the numba kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each kernel runs once untimed per backend (numba compile / cache load), then
the best of ``--repeat`` runs is reported. Outputs are checked for equality.
"""
import argparse
import time

import numpy as np

from emoe_tracker import kernels


def workloads(rng):
    h, w = 128, 128
    n = 200_000
    xs, ys = rng.integers(0, w, n), rng.integers(0, h, n)
    ps = rng.choice([-1, 1], n)
    prev = np.log(rng.uniform(0.05, 1.0, (h, w)))
    cur = prev + rng.normal(0, 0.4, (h, w))
    img = rng.uniform(size=(h, w, 3))
    ious = rng.uniform(size=100_000)
    thr = np.arange(21) / 20.0
    err = rng.uniform(0, 50, size=100_000)

    def emulate():
        ref = prev.copy()
        return kernels.emulate_events(prev, cur, ref, 0, 33333, 0.1)

    return {
        "accumulate_polarity (200k events)": lambda: kernels.accumulate_polarity(xs, ys, ps, h, w),
        "emulate_events (128x128)": emulate,
        "directional_blur (128x128x3, len 9)": lambda: kernels.directional_blur(img, 0.6, 0.8, 9),
        "success_counts (100k x 21)": lambda: kernels.success_counts(ious, thr),
        "precision_counts (100k)": lambda: kernels.precision_counts(err, np.array([20.0])),
    }


def best_time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def same(a, b):
    if isinstance(a, tuple):
        return all(np.array_equal(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = kernels.available_backends()
    jobs = workloads(np.random.default_rng(0))
    print(f"{'kernel':40s}" + "".join(f"{b:>12s}" for b in backends) + f"{'speedup':>10s}  match")
    for name, fn in jobs.items():
        times, outs = {}, {}
        for b in backends:
            prev = kernels.set_backend(b)
            try:
                outs[b] = fn()
                times[b] = best_time(fn, args.repeat)
            finally:
                kernels.set_backend(prev)
        speed = times["numpy"] / times["numba"] if "numba" in times else float("nan")
        ok = same(outs["numpy"], outs[backends[-1]]) if len(backends) > 1 else True
        print(f"{name:40s}" + "".join(f"{times[b] * 1e3:10.3f}ms" for b in backends)
              + f"{speed:9.1f}x  {'yes' if ok else 'NO'}")


if __name__ == "__main__":
    main()
