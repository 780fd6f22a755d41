"""Pure numpy implementations of the hot kernels.

These are the reference versions of the routines in ``_kernels.pyx``.  Both
implementations use the same integer arithmetic for split scoring and the
same splitmix64 stream for feature sampling, so a tree grown by either
backend is bit-identical.
"""

import math

import numpy as np

_MASK64 = (1 << 64) - 1


class SplitMix64:
    """Minimal splitmix64 generator (identical to the C version)."""

    __slots__ = ("state",)

    def __init__(self, seed):
        self.state = int(seed) & _MASK64

    def next(self):
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)


def _best_split(Xt, y, w, idx, n_classes, m_try, min_leaf, rng):
    n_features = Xt.shape[0]
    n = idx.shape[0]
    feats = list(range(n_features))
    best = -math.inf
    best_f, best_t, best_p = -1, 0.0, 0
    best_order = None
    visited = 0
    i = 0
    onehot = np.zeros((n, n_classes), dtype=np.int64)
    while i < n_features and visited < m_try:
        j = i + rng.next() % (n_features - i)
        feats[i], feats[j] = feats[j], feats[i]
        f = feats[i]
        i += 1
        vals = Xt[f, idx]
        order = np.argsort(vals, kind="stable")
        v = vals[order]
        if v[0] == v[-1]:
            continue
        visited += 1
        onehot[:] = 0
        onehot[np.arange(n), y[idx[order]]] = w[idx[order]]
        left = np.cumsum(onehot, axis=0)[:-1]
        right = left[-1] + onehot[-1] - left
        wl = left.sum(axis=1)
        wr = right.sum(axis=1)
        crit = (left * left).sum(axis=1) / wl + (right * right).sum(axis=1) / wr
        p = np.arange(1, n)
        valid = (v[:-1] < v[1:]) & (p >= min_leaf) & (n - p >= min_leaf)
        if not valid.any():
            continue
        crit = np.where(valid, crit, -np.inf)
        k = int(np.argmax(crit))
        if crit[k] > best:
            best = float(crit[k])
            best_f = f
            lo, hi = v[k], v[k + 1]
            t = (lo + hi) * 0.5
            if not t < hi:
                t = lo
            best_t = float(t)
            best_p = k + 1
            best_order = order
    return best_f, best_t, best_p, best_order


def build_tree(Xt, y, rows, weights, n_classes, m_try, seed, min_leaf=1):
    """Grow one unpruned CART tree with Gini splits.

    Parameters
    ----------
    Xt : ndarray, shape (n_features, n_samples)
        Feature-major training matrix.
    y : ndarray of intp
        Class indices for every sample.
    rows : ndarray of intp
        Distinct in-bag sample indices.
    weights : ndarray of int64, shape (n_samples,)
        Bootstrap multiplicity of every sample (0 for out-of-bag).
    n_classes, m_try, min_leaf : int
    seed : int
        64-bit seed of the per-tree feature-sampling stream.

    Returns
    -------
    feature, threshold, left, right, value : ndarray
        Node arrays; ``feature == -1`` marks a leaf, ``value`` holds the
        weighted class counts of every node.
    """
    rng = SplitMix64(seed)
    idx = np.array(rows, dtype=np.intp)
    y = np.asarray(y, dtype=np.intp)
    w = np.asarray(weights, dtype=np.int64)
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(None)
        return len(feature) - 1

    stack = [(new_node(), 0, idx.shape[0])]
    while stack:
        nid, s, e = stack.pop()
        seg = idx[s:e]
        counts = np.bincount(y[seg], weights=w[seg], minlength=n_classes)
        value[nid] = counts
        if np.count_nonzero(counts) <= 1 or e - s < 2 * min_leaf:
            continue
        f, t, p, order = _best_split(Xt, y, w, seg, n_classes, m_try, min_leaf, rng)
        if f < 0:
            continue
        idx[s:e] = seg[order]
        lid = new_node()
        rid = new_node()
        feature[nid] = f
        threshold[nid] = t
        left[nid] = lid
        right[nid] = rid
        stack.append((rid, s + p, e))
        stack.append((lid, s, s + p))

    return (
        np.array(feature, dtype=np.int32),
        np.array(threshold, dtype=np.float64),
        np.array(left, dtype=np.int32),
        np.array(right, dtype=np.int32),
        np.array(value, dtype=np.float64).reshape(len(feature), n_classes),
    )


def apply_forest(feature, threshold, left, right, offsets, X):
    """Return the global leaf index reached by every sample in every tree."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    n_trees = offsets.shape[0] - 1
    out = np.empty((n, n_trees), dtype=np.int64)
    rows = np.arange(n)
    for t in range(n_trees):
        node = np.full(n, offsets[t], dtype=np.int64)
        while True:
            f = feature[node]
            inner = f >= 0
            if not inner.any():
                break
            sel = rows[inner]
            nsel = node[inner]
            go_left = X[sel, f[inner]] <= threshold[nsel]
            node[inner] = offsets[t] + np.where(go_left, left[nsel], right[nsel])
        out[:, t] = node
    return out


def permutation_entropy_rows(X, order, delay=1):
    """Normalised permutation entropy of every row of ``X``.

    Ordinal patterns use a stable argsort, so tied values keep their
    temporal order.  Entropy is divided by ``log(order!)``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n = X.shape[1] - (order - 1) * delay
    out = np.zeros(X.shape[0])
    if n <= 0:
        return out
    norm = math.log(math.factorial(order))
    powers = order ** np.arange(order, dtype=np.int64)
    for r in range(X.shape[0]):
        win = np.lib.stride_tricks.sliding_window_view(X[r], (order - 1) * delay + 1)[:, ::delay]
        codes = np.argsort(win, axis=1, kind="stable").astype(np.int64) @ powers
        _, counts = np.unique(codes, return_counts=True)
        h = 0.0
        for c in counts:
            p = c / n
            h -= p * math.log(p)
        out[r] = h / norm
    return out
