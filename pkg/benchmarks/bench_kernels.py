"""Time the compiled kernels against the numpy fallback.

Run with ``python3 benchmarks/bench_kernels.py [--repeat N]``.  Both
backends are imported side by side; outputs are compared for equality
before any timing is reported.
"""

import argparse
import time

import numpy as np

from psgrbd import _fallback

try:
    from psgrbd import _kernels
except ImportError:  # extension not built
    _kernels = None


def _data(n=4000, m=85, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, m))
    y = (X[:, 0] + 0.5 * X[:, 1] + rng.normal(scale=0.5, size=n) > 0).astype(np.intp)
    y += (X[:, 2] > 1.0).astype(np.intp)
    draws = rng.integers(0, n, size=n)
    weights = np.bincount(draws, minlength=n).astype(np.int64)
    rows = np.nonzero(weights)[0].astype(np.intp)
    return X, np.ascontiguousarray(X.T), y, rows, weights


def _best(fn, repeat):
    times = []
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    if _kernels is None:
        print("compiled extension not available; nothing to compare")
        return 1

    X, Xt, y, rows, weights = _data()
    m_try = 9
    tree = _fallback.build_tree(Xt, y, rows, weights, 3, m_try, 1234)
    offsets = np.array([0, tree[0].shape[0]], dtype=np.int64)
    pe_rows = np.random.default_rng(1).normal(size=(90, 500))

    cases = {
        "build_tree (4000 x 85)": lambda k: k.build_tree(Xt, y, rows, weights, 3, m_try, 1234),
        "apply_forest (1 tree, 4000 rows)": lambda k: k.apply_forest(*tree[:4], offsets, X),
        "permutation_entropy (90 x 500, order 10)": lambda k: k.permutation_entropy_rows(pe_rows, 10),
    }
    print(f"{'kernel':44s} {'python s':>10s} {'cython s':>10s} {'speed-up':>9s}  equal")
    for name, call in cases.items():
        tp, op = _best(lambda: call(_fallback), args.repeat)
        tc, oc = _best(lambda: call(_kernels), args.repeat)
        print(f"{name:44s} {tp:10.4f} {tc:10.4f} {tp / tc:8.1f}x  {_same(op, oc)}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
