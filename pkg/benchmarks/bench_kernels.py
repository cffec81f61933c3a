"""Timing comparison of the compiled and pure-Python kernels.

Run as: python benchmarks/bench_kernels.py [--repeats N]
Sizes mirror the training defaults: a 768-entry queue of 32-d embeddings for
the classifier sweep, and top-100 selection over a 4096-doc joint index for
256 queries.
"""

import argparse
import time

import numpy as np

from daret import _kernels_py as pure
from daret import numerics as nm

try:
    from daret import _kernels as compiled
except ImportError:
    compiled = None


def _time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_sweep(impl, repeats):
    rng = nm.stream_rng(0, "clf")
    X = rng.normal(size=(768, 32))
    y = (rng.random(768) < 0.5).astype(np.int64)
    order = rng.permutation(768).astype(np.int64)

    def run():
        W = np.zeros((2, 32))
        impl.classifier_sweep(W, X, y, order, 0.05)

    return _time(run, repeats)


def bench_top_k(impl, repeats):
    rng = nm.stream_rng(1, "data")
    scores = rng.normal(size=(256, 4096))

    def run():
        impl.top_k_batch(scores, 100)

    return _time(run, repeats)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()

    impls = [("python", pure)]
    if compiled is not None:
        impls.append(("compiled", compiled))
    else:
        print("extension not built; timing the pure backend only")

    rows = []
    for bench_name, bench in (("classifier_sweep", bench_sweep), ("top_k_batch", bench_top_k)):
        times = {name: bench(impl, args.repeats) for name, impl in impls}
        rows.append((bench_name, times))

    print(f"{'kernel':<18} " + " ".join(f"{name + ' (ms)':>14}" for name, _ in impls) + "   speedup")
    for bench_name, times in rows:
        cells = " ".join(f"{times[name] * 1e3:>14.3f}" for name, _ in impls)
        if compiled is not None:
            speed = times["python"] / times["compiled"]
            print(f"{bench_name:<18} {cells}   {speed:6.1f}x")
        else:
            print(f"{bench_name:<18} {cells}")


if __name__ == "__main__":
    main()
