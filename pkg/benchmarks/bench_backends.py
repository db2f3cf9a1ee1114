"""Time the clustering kernels under the numba and pure-numpy backends.

Usage: python benchmarks/bench_backends.py [--sizes 40 64] [--dim 64] [--clusters 400] [--repeats 5]
"""

import argparse
import statistics
import time

import numpy as np

from ailurus import _backend
from ailurus.dpc import cluster, neighbors_for
from ailurus.grid import DpcConfig, synth_grid


def median_ms(fn, repeats):
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append((time.perf_counter() - start) * 1e3)
    return statistics.median(times)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", type=int, nargs="+", default=[40, 64])
    parser.add_argument("--dim", type=int, default=64)
    parser.add_argument("--clusters", type=int, default=400)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    backends = ["numba", "numpy"] if _backend.HAVE_NUMBA else ["numpy"]
    print(f"{'grid':>8} {'backend':>8} {'median ms':>10} {'speedup':>8}")
    for side in args.sizes:
        grid = synth_grid("random", side, side, args.dim, seed=0)
        cfg = DpcConfig(num_clusters=min(args.clusters, side * side))
        nbr = neighbors_for(grid, cfg)  # shared, so only the kernels are timed
        results, outputs = {}, {}
        for name in backends:
            _backend.USE_NUMBA = name == "numba"
            outputs[name] = cluster(grid, cfg, nbr)  # warm-up and JIT compile
            results[name] = median_ms(lambda: cluster(grid, cfg, nbr), args.repeats)
        if len(outputs) == 2:
            assert np.array_equal(outputs["numba"].reps, outputs["numpy"].reps), "backends disagree"
        for name in backends:
            speedup = results["numpy"] / results[name]
            print(f"{side:>3}x{side:<4} {name:>8} {results[name]:>10.2f} {speedup:>7.2f}x")


if __name__ == "__main__":
    main()
