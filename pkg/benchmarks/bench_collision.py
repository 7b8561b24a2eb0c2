"""Compare the compiled SAT kernel against the numpy fallback.

    python benchmarks/bench_collision.py [--n 200000] [--small 96] [--repeat 5]

Times one large batch and many evaluation-sized batches (one rollout's
worth of agent-step pairs) per backend, then checks that both agree.
"""

import argparse
import time

import numpy as np

from clforecast.geometry import BACKEND, _sat_py, overlap_many


def random_pairs(n, seed=0):
    rng = np.random.default_rng(seed)
    a = [rng.uniform(-5, 5, n), rng.uniform(-5, 5, n), rng.uniform(-np.pi, np.pi, n),
         rng.uniform(0.5, 5, n), rng.uniform(0.5, 3, n)]
    b = [rng.uniform(-5, 5, n), rng.uniform(-5, 5, n), rng.uniform(-np.pi, np.pi, n),
         rng.uniform(0.5, 5, n), rng.uniform(0.5, 3, n)]
    return a + b


def best_time(fn, args, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t)
    return best


def report(label, n, fallback, compiled):
    print(f"{label}: {n} pairs per call")
    print(f"  python   {fallback * 1e6:10.1f} us")
    if compiled is not None:
        print(f"  compiled {compiled * 1e6:10.1f} us  speedup {fallback / compiled:5.2f}x")


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--n", type=int, default=200_000)
    p.add_argument("--small", type=int, default=96)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()
    big = random_pairs(args.n)
    small = random_pairs(args.small, seed=1)
    have = BACKEND == "compiled"
    if not have:
        print("compiled kernel not built; run `pip install --no-build-isolation -e .` with Cython available")
    report("batch", args.n, best_time(_sat_py.overlap_many, big, args.repeat),
           best_time(overlap_many, big, args.repeat) if have else None)
    loops = 2000

    def many(fn):
        return lambda *a: [fn(*a) for _ in range(loops)]

    report("small", args.small, best_time(many(_sat_py.overlap_many), small, args.repeat) / loops,
           best_time(many(overlap_many), small, args.repeat) / loops if have else None)
    if have:
        same = np.array_equal(overlap_many(*big), _sat_py.overlap_many(*big))
        print(f"backends agree: {same}")


if __name__ == "__main__":
    main()
