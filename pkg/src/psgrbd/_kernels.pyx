# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_fallback.py``.

Keep the arithmetic in lock-step with the numpy reference: split scores are
built from exact int64 class counts and compared with a strict ``>``, and
feature sampling draws from the same splitmix64 stream.
"""

import math

import numpy as np
cimport numpy as cnp
from libc.math cimport log, INFINITY
from libc.stdint cimport int64_t, uint64_t, int32_t
from libc.stdlib cimport malloc, free

cnp.import_array()


cdef inline uint64_t splitmix_next(uint64_t* state) noexcept nogil:
    cdef uint64_t z
    state[0] += <uint64_t>0x9E3779B97F4A7C15
    z = state[0]
    z = (z ^ (z >> 30)) * <uint64_t>0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * <uint64_t>0x94D049BB133111EB
    return z ^ (z >> 31)


# --- sorting of (value, sample) pairs: introsort ---------------------------

cdef inline void _swap(double* v, Py_ssize_t* s, Py_ssize_t i, Py_ssize_t j) noexcept nogil:
    cdef double tv = v[i]
    cdef Py_ssize_t ts = s[i]
    v[i] = v[j]
    s[i] = s[j]
    v[j] = tv
    s[j] = ts


cdef inline double _median3(double* v, Py_ssize_t n) noexcept nogil:
    cdef double a = v[0], b = v[n // 2], c = v[n - 1]
    if a < b:
        if b < c:
            return b
        elif a < c:
            return c
        return a
    if a < c:
        return a
    elif b < c:
        return c
    return b


cdef void _sift_down(double* v, Py_ssize_t* s, Py_ssize_t start, Py_ssize_t end) noexcept nogil:
    cdef Py_ssize_t child, maxind, root = start
    while True:
        child = root * 2 + 1
        maxind = root
        if child < end and v[maxind] < v[child]:
            maxind = child
        if child + 1 < end and v[maxind] < v[child + 1]:
            maxind = child + 1
        if maxind == root:
            break
        _swap(v, s, root, maxind)
        root = maxind


cdef void _heapsort(double* v, Py_ssize_t* s, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t start = (n - 2) // 2, end = n
    while True:
        _sift_down(v, s, start, n)
        if start == 0:
            break
        start -= 1
    end = n - 1
    while end > 0:
        _swap(v, s, 0, end)
        _sift_down(v, s, 0, end)
        end -= 1


cdef void _introsort(double* v, Py_ssize_t* s, Py_ssize_t n, int maxd) noexcept nogil:
    cdef double pivot, tv
    cdef Py_ssize_t i, l, r, j, ts
    while n > 1:
        if n < 16:
            for i in range(1, n):
                tv = v[i]
                ts = s[i]
                j = i
                while j > 0 and v[j - 1] > tv:
                    v[j] = v[j - 1]
                    s[j] = s[j - 1]
                    j -= 1
                v[j] = tv
                s[j] = ts
            return
        if maxd <= 0:
            _heapsort(v, s, n)
            return
        maxd -= 1
        pivot = _median3(v, n)
        # three-way partition
        i = l = 0
        r = n
        while i < r:
            if v[i] < pivot:
                _swap(v, s, i, l)
                i += 1
                l += 1
            elif v[i] > pivot:
                r -= 1
                _swap(v, s, i, r)
            else:
                i += 1
        _introsort(v, s, l, maxd)
        v += r
        s += r
        n -= r


cdef inline void sort_pairs(double* v, Py_ssize_t* s, Py_ssize_t n) noexcept nogil:
    cdef int maxd
    if n == 0:
        return
    maxd = 2 * <int>log(<double>n)
    _introsort(v, s, n, maxd)


# --- tree growing ----------------------------------------------------------

cdef struct SplitResult:
    Py_ssize_t feature
    double threshold
    Py_ssize_t pos
    double crit


cdef SplitResult _best_split(
    const double[:, ::1] Xt, const Py_ssize_t[::1] y, const int64_t[::1] w,
    Py_ssize_t* idx, Py_ssize_t n, Py_ssize_t n_classes, Py_ssize_t m_try,
    Py_ssize_t min_leaf, uint64_t* rng, Py_ssize_t* feats, double* vals,
    Py_ssize_t* srt, int64_t* lc, int64_t* rc,
) noexcept nogil:
    cdef Py_ssize_t n_features = Xt.shape[0]
    cdef Py_ssize_t i = 0, j, k, f, p, c, visited = 0, row, tmp
    cdef int64_t wk, wl, wr, sl, sr, ww
    cdef double crit, t
    cdef SplitResult best
    best.feature = -1
    best.threshold = 0.0
    best.pos = 0
    best.crit = -INFINITY
    for k in range(n_features):
        feats[k] = k
    while i < n_features and visited < m_try:
        j = i + <Py_ssize_t>(splitmix_next(rng) % <uint64_t>(n_features - i))
        tmp = feats[i]
        feats[i] = feats[j]
        feats[j] = tmp
        f = feats[i]
        i += 1
        for k in range(n):
            srt[k] = idx[k]
            vals[k] = Xt[f, idx[k]]
        sort_pairs(vals, srt, n)
        if vals[0] == vals[n - 1]:
            continue
        visited += 1
        for c in range(n_classes):
            lc[c] = 0
            rc[c] = 0
        wr = 0
        for k in range(n):
            row = srt[k]
            rc[y[row]] += w[row]
            wr += w[row]
        sr = 0
        for c in range(n_classes):
            sr += rc[c] * rc[c]
        wl = 0
        sl = 0
        for k in range(n - 1):
            row = srt[k]
            c = y[row]
            ww = w[row]
            sl += (2 * lc[c] + ww) * ww
            sr += (ww - 2 * rc[c]) * ww
            lc[c] += ww
            rc[c] -= ww
            wl += ww
            wr -= ww
            p = k + 1
            if not (vals[k] < vals[k + 1]):
                continue
            if p < min_leaf or n - p < min_leaf:
                continue
            crit = <double>sl / <double>wl + <double>sr / <double>wr
            if crit > best.crit:
                best.crit = crit
                best.feature = f
                t = (vals[k] + vals[k + 1]) * 0.5
                if not (t < vals[k + 1]):
                    t = vals[k]
                best.threshold = t
                best.pos = p
    return best


def build_tree(Xt, y, rows, weights, Py_ssize_t n_classes, Py_ssize_t m_try,
               seed, Py_ssize_t min_leaf=1):
    """Grow one unpruned CART tree; see ``_fallback.build_tree``."""
    cdef const double[:, ::1] Xv = np.ascontiguousarray(Xt, dtype=np.float64)
    cdef const Py_ssize_t[::1] yv = np.ascontiguousarray(y, dtype=np.intp)
    cdef const int64_t[::1] wv = np.ascontiguousarray(weights, dtype=np.int64)
    cdef Py_ssize_t[::1] idx = np.array(rows, dtype=np.intp)
    cdef Py_ssize_t n = idx.shape[0]
    cdef Py_ssize_t n_features = Xv.shape[0]
    cdef uint64_t rng = <uint64_t>(int(seed) & 0xFFFFFFFFFFFFFFFF)

    cdef Py_ssize_t cap = max(16, 2 * n + 1)
    cdef cnp.ndarray[int32_t, ndim=1] feature = np.full(cap, -1, dtype=np.int32)
    cdef cnp.ndarray[double, ndim=1] threshold = np.zeros(cap, dtype=np.float64)
    cdef cnp.ndarray[int32_t, ndim=1] left = np.full(cap, -1, dtype=np.int32)
    cdef cnp.ndarray[int32_t, ndim=1] right = np.full(cap, -1, dtype=np.int32)
    cdef cnp.ndarray[double, ndim=2] value = np.zeros((cap, n_classes), dtype=np.float64)

    cdef Py_ssize_t* stack = <Py_ssize_t*>malloc(3 * cap * sizeof(Py_ssize_t))
    cdef Py_ssize_t* feats = <Py_ssize_t*>malloc(max(n_features, 1) * sizeof(Py_ssize_t))
    cdef double* vals = <double*>malloc(max(n, 1) * sizeof(double))
    cdef Py_ssize_t* srt = <Py_ssize_t*>malloc(max(n, 1) * sizeof(Py_ssize_t))
    cdef int64_t* lc = <int64_t*>malloc(n_classes * sizeof(int64_t))
    cdef int64_t* rc = <int64_t*>malloc(n_classes * sizeof(int64_t))
    cdef int64_t* counts = <int64_t*>malloc(n_classes * sizeof(int64_t))
    if not (stack and feats and vals and srt and lc and rc and counts):
        raise MemoryError()

    cdef Py_ssize_t sp = 0, n_nodes = 1, nid, s, e, k, c, nonzero, lid, rid, row
    cdef SplitResult res
    try:
        with nogil:
            stack[0] = 0
            stack[1] = 0
            stack[2] = n
            sp = 1
            while sp > 0:
                sp -= 1
                nid = stack[3 * sp]
                s = stack[3 * sp + 1]
                e = stack[3 * sp + 2]
                for c in range(n_classes):
                    counts[c] = 0
                for k in range(s, e):
                    row = idx[k]
                    counts[yv[row]] += wv[row]
                nonzero = 0
                for c in range(n_classes):
                    value[nid, c] = <double>counts[c]
                    if counts[c] != 0:
                        nonzero += 1
                if nonzero <= 1 or e - s < 2 * min_leaf:
                    continue
                res = _best_split(Xv, yv, wv, &idx[s], e - s, n_classes, m_try,
                                  min_leaf, &rng, feats, vals, srt, lc, rc)
                if res.feature < 0:
                    continue
                # sorted order of the winning feature; rows <= threshold go left
                for k in range(e - s):
                    srt[k] = idx[s + k]
                    vals[k] = Xv[res.feature, idx[s + k]]
                sort_pairs(vals, srt, e - s)
                for k in range(e - s):
                    idx[s + k] = srt[k]
                lid = n_nodes
                rid = n_nodes + 1
                n_nodes += 2
                feature[nid] = <int32_t>res.feature
                threshold[nid] = res.threshold
                left[nid] = <int32_t>lid
                right[nid] = <int32_t>rid
                stack[3 * sp] = rid
                stack[3 * sp + 1] = s + res.pos
                stack[3 * sp + 2] = e
                sp += 1
                stack[3 * sp] = lid
                stack[3 * sp + 1] = s
                stack[3 * sp + 2] = s + res.pos
                sp += 1
    finally:
        free(stack)
        free(feats)
        free(vals)
        free(srt)
        free(lc)
        free(rc)
        free(counts)

    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        value[:n_nodes].copy(),
    )


def apply_forest(feature, threshold, left, right, offsets, X):
    """Return the global leaf index reached by every sample in every tree."""
    cdef const int32_t[::1] fv = np.ascontiguousarray(feature, dtype=np.int32)
    cdef const double[::1] tv = np.ascontiguousarray(threshold, dtype=np.float64)
    cdef const int32_t[::1] lv = np.ascontiguousarray(left, dtype=np.int32)
    cdef const int32_t[::1] rv = np.ascontiguousarray(right, dtype=np.int32)
    cdef const int64_t[::1] ov = np.ascontiguousarray(offsets, dtype=np.int64)
    cdef const double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef Py_ssize_t n = Xv.shape[0], n_trees = ov.shape[0] - 1, i, t
    cdef int64_t base, node
    out = np.empty((n, n_trees), dtype=np.int64)
    cdef int64_t[:, ::1] outv = out
    with nogil:
        for i in range(n):
            for t in range(n_trees):
                base = ov[t]
                node = base
                while fv[node] >= 0:
                    if Xv[i, fv[node]] <= tv[node]:
                        node = base + lv[node]
                    else:
                        node = base + rv[node]
                outv[i, t] = node
    return out


# --- permutation entropy ---------------------------------------------------

def permutation_entropy_rows(X, Py_ssize_t order, Py_ssize_t delay=1):
    """Normalised permutation entropy of every row; see ``_fallback``."""
    cdef const double[:, ::1] Xv = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
    cdef Py_ssize_t n_rows = Xv.shape[0]
    cdef Py_ssize_t n = Xv.shape[1] - (order - 1) * delay
    out = np.zeros(n_rows)
    if n <= 0:
        return out
    cdef double[::1] outv = out
    cdef double norm = math.log(math.factorial(order))
    codes_arr = np.empty(n, dtype=np.int64)
    cdef int64_t[::1] codes = codes_arr
    cdef Py_ssize_t r, i, a, b, k, run
    cdef Py_ssize_t perm[32]
    cdef double vtmp, h, p
    cdef int64_t code, pw
    if order > 32:
        raise ValueError("order too large")
    for r in range(n_rows):
        with nogil:
            for i in range(n):
                for a in range(order):
                    perm[a] = a
                # stable insertion argsort of the window
                for a in range(1, order):
                    k = perm[a]
                    vtmp = Xv[r, i + k * delay]
                    b = a
                    while b > 0 and Xv[r, i + perm[b - 1] * delay] > vtmp:
                        perm[b] = perm[b - 1]
                        b -= 1
                    perm[b] = k
                code = 0
                pw = 1
                for a in range(order):
                    code += perm[a] * pw
                    pw *= order
                codes[i] = code
        codes_arr.sort()
        with nogil:
            h = 0.0
            run = 1
            for i in range(1, n + 1):
                if i < n and codes[i] == codes[i - 1]:
                    run += 1
                    continue
                p = <double>run / <double>n
                h -= p * log(p)
                run = 1
            outv[r] = h / norm
    return out
