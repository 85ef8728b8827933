"""Compare the compiled retrieval kernel against the pure-numpy fallback.

Usage: python benchmarks/bench_retrieval.py [--rows 56778] [--dim 768]
"""

import argparse
import time

import numpy as np

from icldst._kernels import BACKEND, pure

try:
    from icldst._kernels import _scan
except ImportError:
    _scan = None


def unit_rows(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    m = rng.standard_normal((rows, dim)).astype(np.float32)
    norms = np.linalg.norm(m.astype(np.float64), axis=1, keepdims=True)
    return (m.astype(np.float64) / norms).astype(np.float32)


def bench(fn, matrix, queries, repeats=3):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        for q in queries:
            fn(matrix, q)
        best = min(best, time.perf_counter() - start)
    return best / len(queries)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--rows", type=int, default=56778)
    parser.add_argument("--dim", type=int, default=768)
    parser.add_argument("--queries", type=int, default=20)
    args = parser.parse_args()

    rng = np.random.default_rng(7)
    matrix = unit_rows(rng, args.rows, args.dim)
    queries = unit_rows(rng, args.queries, args.dim)

    print(f"store: {args.rows} x {args.dim} float32, active kernel: {BACKEND}")
    t_pure = bench(pure.dot_scores, matrix, queries)
    print(f"pure numpy : {t_pure * 1000:8.2f} ms/query")
    if _scan is None:
        print("compiled   : not built (pip install -e . builds it)")
        return
    t_scan = bench(_scan.dot_scores, matrix, queries)
    print(f"compiled   : {t_scan * 1000:8.2f} ms/query")
    print(f"speedup    : {t_pure / t_scan:8.2f}x")

    mismatches = 0
    for q in queries:
        if not np.array_equal(pure.dot_scores(matrix, q), _scan.dot_scores(matrix, q)):
            mismatches += 1
    print(f"bitwise-equal scores on {args.queries} queries: {args.queries - mismatches}/{args.queries}")


if __name__ == "__main__":
    main()
