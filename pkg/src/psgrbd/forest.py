"""Random forest classifier: bootstrap-aggregated CART trees with Gini splits.

Each tree draws its own random stream from ``(seed, tree index)``, so the
ensemble is identical whatever the number of worker processes.
"""

import hashlib
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _backend, binio
from .errors import ArgumentError, ParseError, SchemaError

FORMAT_VERSION = 1


def _tree_streams(seed, tree_index):
    """Bootstrap generator and 64-bit feature-sampling seed for one tree."""
    ss = np.random.SeedSequence([int(seed), int(tree_index)])
    boot_state, split_state = ss.spawn(2)
    return np.random.default_rng(boot_state), int(split_state.generate_state(1, np.uint64)[0])


def _grow(args):
    Xt, y, n_classes, m_try, min_leaf, seed, tree_index = args
    n = y.shape[0]
    rng, split_seed = _tree_streams(seed, tree_index)
    draws = rng.integers(0, n, size=n)
    weights = np.bincount(draws, minlength=n).astype(np.int64)
    rows = np.nonzero(weights)[0].astype(np.intp)
    tree = _backend.build_tree(Xt, y, rows, weights, n_classes, m_try, split_seed, min_leaf)
    return tree, weights == 0


@dataclass
class TrainedForest:
    """Flattened node arrays of every tree plus training metadata.

    ``left``/``right`` are tree-local node indices; tree ``t`` occupies
    nodes ``offsets[t]:offsets[t + 1]``.  ``leaf_class`` is the majority
    class of every node (lowest class index on ties).
    """

    classes: tuple
    schema_hash: str
    feature_names: tuple
    n_trees: int
    m_try: int
    seed: int
    min_leaf: int
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_class: np.ndarray
    offsets: np.ndarray
    oob_accuracy: float = float("nan")

    @property
    def M(self):
        return len(self.feature_names)

    def tree_sizes(self):
        return np.diff(self.offsets)

    def to_bytes(self):
        meta = {"classes": list(self.classes), "schema_hash": self.schema_hash,
                "feature_names": list(self.feature_names), "n_trees": self.n_trees,
                "m_try": self.m_try, "seed": self.seed, "min_leaf": self.min_leaf,
                "oob_accuracy": None if math.isnan(self.oob_accuracy) else self.oob_accuracy}
        arrays = {"feature": self.feature, "threshold": self.threshold, "left": self.left,
                  "right": self.right, "leaf_class": self.leaf_class, "offsets": self.offsets}
        return binio.dumps("random-forest", FORMAT_VERSION, meta, arrays)

    @classmethod
    def from_bytes(cls, data):
        version, meta, a = binio.loads(data, kind="random-forest")
        if version != FORMAT_VERSION:
            raise ParseError(f"unsupported model version {version}", 0)
        oob = meta["oob_accuracy"]
        return cls(tuple(meta["classes"]), meta["schema_hash"], tuple(meta["feature_names"]),
                   meta["n_trees"], meta["m_try"], meta["seed"], meta["min_leaf"],
                   a["feature"], a["threshold"], a["left"], a["right"], a["leaf_class"],
                   a["offsets"], float("nan") if oob is None else oob)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def digest(self):
        return hashlib.sha256(self.to_bytes()).hexdigest()


def _as_matrix(X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ArgumentError("X must be a 2-D array")
    return X


def train(X, y, classes, n_trees=500, m_try=None, seed=0, min_leaf=1, schema_hash="",
          feature_names=None, n_jobs=1):
    """Fit a random forest.

    Parameters
    ----------
    X : array_like, shape (n_samples, M)
    y : sequence
        Labels, each a member of ``classes``.
    classes : sequence
        Class order; it fixes vote tie-breaking (earlier wins).
    n_trees : int
    m_try : int, optional
        Candidate features per split; ``floor(sqrt(M))`` by default.
    seed : int
    n_jobs : int
        Worker processes for tree growing; results do not depend on it.

    Returns
    -------
    TrainedForest
    """
    X = _as_matrix(X)
    n, M = X.shape
    classes = tuple(classes)
    lookup = {c: i for i, c in enumerate(classes)}
    try:
        yi = np.array([lookup[v] for v in y], dtype=np.intp)
    except KeyError as exc:
        raise ArgumentError(f"label {exc.args[0]!r} not in classes") from None
    if n == 0 or yi.shape[0] != n:
        raise ArgumentError("X and y must be non-empty and of equal length")
    if m_try is None:
        m_try = max(1, math.isqrt(M))
    if not 1 <= m_try <= M:
        raise ArgumentError(f"m_try must lie in [1, {M}], got {m_try}")
    if n_trees < 1 or min_leaf < 1:
        raise ArgumentError("n_trees and min_leaf must be positive")
    if not np.isfinite(X).all():
        raise ArgumentError("training features must be finite")
    feature_names = tuple(feature_names) if feature_names is not None else tuple(f"f{j}" for j in range(M))
    if len(feature_names) != M:
        raise ArgumentError("feature_names length differs from the number of columns")

    Xt = np.ascontiguousarray(X.T)
    jobs = [(Xt, yi, len(classes), m_try, min_leaf, seed, t) for t in range(n_trees)]
    if n_jobs and n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            grown = list(ex.map(_grow, jobs, chunksize=max(1, n_trees // (4 * n_jobs))))
    else:
        grown = [_grow(j) for j in jobs]

    trees = [g[0] for g in grown]
    sizes = np.array([t[0].shape[0] for t in trees], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    forest = TrainedForest(
        classes=classes, schema_hash=schema_hash, feature_names=feature_names, n_trees=n_trees,
        m_try=m_try, seed=int(seed), min_leaf=min_leaf,
        feature=np.concatenate([t[0] for t in trees]),
        threshold=np.concatenate([t[1] for t in trees]),
        left=np.concatenate([t[2] for t in trees]),
        right=np.concatenate([t[3] for t in trees]),
        leaf_class=np.concatenate([np.argmax(t[4], axis=1) for t in trees]).astype(np.int32),
        offsets=offsets,
    )
    oob = np.stack([g[1] for g in grown], axis=1)
    forest.oob_accuracy = _oob_accuracy(forest, X, yi, oob)
    return forest


def _leaf_votes(forest, X):
    leaves = _backend.apply_forest(forest.feature, forest.threshold, forest.left, forest.right,
                                   forest.offsets, X)
    return forest.leaf_class[leaves]


def _vote_counts(votes, n_classes, mask=None):
    counts = np.zeros((votes.shape[0], n_classes))
    for c in range(n_classes):
        hit = votes == c
        if mask is not None:
            hit &= mask
        counts[:, c] = hit.sum(axis=1)
    return counts


def _oob_accuracy(forest, X, yi, oob_mask):
    counts = _vote_counts(_leaf_votes(forest, X), len(forest.classes), oob_mask)
    has = counts.sum(axis=1) > 0
    if not has.any():
        return float("nan")
    return float((np.argmax(counts[has], axis=1) == yi[has]).mean())


def check_schema(forest, schema_hash, n_features):
    if schema_hash is not None and forest.schema_hash and schema_hash != forest.schema_hash:
        raise SchemaError(f"model schema {forest.schema_hash} does not match input schema {schema_hash}")
    if n_features != forest.M:
        raise SchemaError(f"model expects {forest.M} features, input has {n_features}")


def predict_proba(forest, X, schema_hash=None):
    """Vote fractions, shape ``(n_samples, n_classes)``; each row sums to 1."""
    X = _as_matrix(X)
    check_schema(forest, schema_hash, X.shape[1])
    if X.shape[0] == 0:
        return np.zeros((0, len(forest.classes)))
    counts = _vote_counts(_leaf_votes(forest, X), len(forest.classes))
    return counts / forest.n_trees


def predict_indices(forest, X, schema_hash=None):
    """Class indices by majority vote; ties go to the earliest class."""
    p = predict_proba(forest, X, schema_hash)
    return np.argmax(p, axis=1) if p.shape[0] else np.zeros(0, dtype=np.intp)


def predict(forest, X, schema_hash=None):
    """Labels and vote fractions for every row of ``X``."""
    p = predict_proba(forest, X, schema_hash)
    idx = np.argmax(p, axis=1) if p.shape[0] else np.zeros(0, dtype=np.intp)
    return [forest.classes[i] for i in idx], p


def permutation_importance(forest, X, y, seed=0, repeats=10, permute=None):
    """Mean increase in error when each column is shuffled.

    Parameters
    ----------
    permute : callable, optional
        ``permute(rng, n)`` returning an index array; defaults to a random
        permutation.  Passing the identity makes every delta exactly 0.

    Returns
    -------
    dict
        Feature name to mean delta error, in column order.
    """
    X = _as_matrix(X)
    lookup = {c: i for i, c in enumerate(forest.classes)}
    yi = np.array([lookup[v] for v in y], dtype=np.intp)
    base_err = float((predict_indices(forest, X) != yi).mean())
    permute = permute or (lambda rng, n: rng.permutation(n))
    out = {}
    for j, name in enumerate(forest.feature_names):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), j]))
        deltas = []
        for _ in range(repeats):
            Xp = X.copy()
            Xp[:, j] = X[permute(rng, X.shape[0]), j]
            deltas.append(float((predict_indices(forest, Xp) != yi).mean()) - base_err)
        out[name] = float(np.mean(deltas))
    return out


# --- fold planning ----------------------------------------------------------------

@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignments: dict
    strata: dict

    def fold_subjects(self, fold):
        return sorted(s for s, f in self.assignments.items() if f == fold)

    def split(self, fold):
        test = self.fold_subjects(fold)
        train = sorted(s for s, f in self.assignments.items() if f != fold)
        return train, test


def make_folds(subjects, cohorts, k=10, seed=0):
    """Subject-level folds stratified by cohort.

    Subjects of each cohort are shuffled and dealt round-robin, with each
    cohort's deal continuing where the previous cohort stopped so fold sizes
    also stay within one of each other.
    """
    subjects = list(subjects)
    cohorts = list(cohorts)
    if len(subjects) != len(cohorts):
        raise ArgumentError("subjects and cohorts differ in length")
    if len(set(subjects)) != len(subjects):
        raise ArgumentError("subject ids must be unique")
    if k < 2 or len(subjects) < k:
        raise ArgumentError(f"need at least k={k} subjects (k >= 2), got {len(subjects)}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x464F4C44]))
    assignments = {}
    cursor = 0
    for cohort in sorted(set(cohorts)):
        members = sorted(s for s, c in zip(subjects, cohorts) if c == cohort)
        for i in rng.permutation(len(members)):
            assignments[members[i]] = cursor % k
            cursor += 1
    return FoldPlan(k, assignments, dict(zip(subjects, cohorts)))
