"""Five-class sleep staging and agreement statistics."""

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import forest as fst
from .errors import ArgumentError, UndefinedError
from .psg_io import STAGES, UNSCORED, Hypnogram

METRIC_NAMES = ("accuracy", "sensitivity", "specificity", "precision", "f1")


def _labels(h):
    return tuple(h.stages) if isinstance(h, Hypnogram) else tuple(h)


def _scored_pairs(a, b):
    a, b = _labels(a), _labels(b)
    if len(a) != len(b):
        raise ArgumentError(f"hypnogram lengths differ ({len(a)} vs {len(b)})")
    keep = [(x, y) for x, y in zip(a, b) if x != UNSCORED and y != UNSCORED]
    return keep


def confusion_matrix(pred, truth, labels=STAGES):
    """Counts with rows = truth, columns = prediction; UNSCORED pairs skipped."""
    pos = {s: i for i, s in enumerate(labels)}
    cm = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for p, t in _scored_pairs(pred, truth):
        cm[pos[t], pos[p]] += 1
    return cm


def cohens_kappa(a, b):
    """Chance-corrected agreement between two stagings.

    Raises
    ------
    UndefinedError
        When no epoch is scored in both hypnograms.
    """
    pairs = _scored_pairs(a, b)
    if not pairs:
        raise UndefinedError("no epochs scored by both raters")
    labels = sorted({x for p in pairs for x in p})
    pos = {s: i for i, s in enumerate(labels)}
    cm = np.zeros((len(labels), len(labels)))
    for x, y in pairs:
        cm[pos[x], pos[y]] += 1
    n = cm.sum()
    po = np.trace(cm) / n
    pe = float((cm.sum(axis=1) * cm.sum(axis=0)).sum()) / (n * n)
    if pe >= 1.0:
        return 1.0
    return float((po - pe) / (1.0 - pe))


def _ratio(num, den):
    return num / den if den > 0 else float("nan")


def binary_metrics(tp, fn, fp, tn):
    """One-vs-rest rates; undefined ratios come back as NaN."""
    sens = _ratio(tp, tp + fn)
    prec = _ratio(tp, tp + fp)
    f1 = _ratio(2 * tp, 2 * tp + fp + fn)
    return {"accuracy": _ratio(tp + tn, tp + fn + fp + tn), "sensitivity": sens,
            "specificity": _ratio(tn, tn + fp), "precision": prec, "f1": f1}


def per_stage_metrics(cm, labels=STAGES):
    total = cm.sum()
    out = {}
    for i, s in enumerate(labels):
        tp = int(cm[i, i])
        fn = int(cm[i].sum() - tp)
        fp = int(cm[:, i].sum() - tp)
        # a stage absent from the reference leaves sensitivity undefined (NaN)
        out[s] = binary_metrics(tp, fn, fp, int(total - tp - fn - fp))
    return out


def macro(per_stage):
    """Mean of each metric over stages, ignoring undefined values."""
    out = {}
    for k in METRIC_NAMES:
        vals = [m[k] for m in per_stage.values() if not np.isnan(m[k])]
        out[k] = float(np.mean(vals)) if vals else float("nan")
    return out


@dataclass
class StageReport:
    """Agreement summary for one group of subjects.

    ``confusion`` pools all epochs; ``kappa`` and the per-stage metrics are
    subject means with their standard deviations in ``*_sd``.
    """

    cohort: str
    n_subjects: int
    confusion: np.ndarray
    kappa: float
    kappa_sd: float
    pooled_kappa: float
    per_stage: dict
    per_stage_sd: dict
    macro: dict
    subject_kappas: dict = field(default_factory=dict)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cohort", "stage", "metric", "mean", "sd"])
        w.writerow([self.cohort, "ALL", "kappa", _fmt(self.kappa), _fmt(self.kappa_sd)])
        w.writerow([self.cohort, "ALL", "pooled_kappa", _fmt(self.pooled_kappa), ""])
        for s in self.per_stage:
            for k in METRIC_NAMES:
                w.writerow([self.cohort, s, k, _fmt(self.per_stage[s][k]), _fmt(self.per_stage_sd[s][k])])
        for k in METRIC_NAMES:
            w.writerow([self.cohort, "MACRO", k, _fmt(self.macro[k]), ""])
        return buf.getvalue()

    def to_text(self):
        lines = [f"cohort {self.cohort}: {self.n_subjects} subjects",
                 f"kappa {self.kappa:.3f} +/- {self.kappa_sd:.3f} (pooled {self.pooled_kappa:.3f})",
                 "stage  " + "  ".join(f"{k:>11}" for k in METRIC_NAMES)]
        for s in self.per_stage:
            lines.append(f"{s:<6} " + "  ".join(
                f"{self.per_stage[s][k]:5.2f}+/-{self.per_stage_sd[s][k]:4.2f}" for k in METRIC_NAMES))
        lines.append("macro  " + "  ".join(f"{self.macro[k]:11.3f}" for k in METRIC_NAMES))
        return "\n".join(lines) + "\n"


def _fmt(v):
    return "" if v is None or np.isnan(v) else repr(float(v))


def _nan_stats(values):
    v = np.array([x for x in values if not np.isnan(x)])
    if v.size == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def stage_metrics(pred, truth, cohort="ALL"):
    """Report for a single subject, or for a cohort when given dicts.

    Parameters
    ----------
    pred, truth : Hypnogram or dict
        A single pair, or ``{subject_id: Hypnogram}`` mappings over the same
        subjects.
    """
    if not isinstance(pred, dict):
        pred, truth = {"_": pred}, {"_": truth}
    subjects = sorted(truth)
    if sorted(pred) != subjects:
        raise ArgumentError("prediction and reference subjects differ")
    cms = {s: confusion_matrix(pred[s], truth[s]) for s in subjects}
    pooled = sum(cms.values())
    kappas = {}
    for s in subjects:
        try:
            kappas[s] = cohens_kappa(pred[s], truth[s])
        except UndefinedError:
            kappas[s] = float("nan")
    per_subject = {s: per_stage_metrics(cms[s]) for s in subjects}
    per_stage, per_stage_sd = {}, {}
    for st in STAGES:
        per_stage[st], per_stage_sd[st] = {}, {}
        for k in METRIC_NAMES:
            per_stage[st][k], per_stage_sd[st][k] = _nan_stats([per_subject[s][st][k] for s in subjects])
    k_mean, k_sd = _nan_stats(kappas.values())
    all_pred = [x for s in subjects for x in _labels(pred[s])]
    all_truth = [x for s in subjects for x in _labels(truth[s])]
    try:
        pooled_k = cohens_kappa(all_pred, all_truth)
    except UndefinedError:
        pooled_k = float("nan")
    return StageReport(cohort, len(subjects), pooled, k_mean, k_sd, pooled_k, per_stage,
                       per_stage_sd, macro(per_stage), kappas)


def stage_recording(model, fm):
    """Predict one stage per row of a FeatureMatrix (no smoothing)."""
    if len(fm) == 0:
        fst.check_schema(model, fm.schema.hash, fm.schema.M)
        return Hypnogram(())
    idx = fst.predict_indices(model, fm.rows, fm.schema.hash)
    return Hypnogram(tuple(model.classes[i] for i in idx))


def train_stager(fms, hypnograms, n_trees=500, m_try=None, seed=0, n_jobs=1):
    """Fit the stager on scored epochs of the given subjects."""
    X, y = [], []
    schema = None
    for sid in sorted(fms):
        fm = fms[sid]
        schema = schema or fm.schema
        stages = hypnograms[sid].aligned(len(fm)).stages
        keep = np.array([s != UNSCORED for s in stages], dtype=bool)
        X.append(fm.rows[keep])
        y.extend(s for s in stages if s != UNSCORED)
    X = np.vstack(X)
    return fst.train(X, y, STAGES, n_trees=n_trees, m_try=m_try, seed=seed,
                     schema_hash=schema.hash, feature_names=schema.names, n_jobs=n_jobs)


@dataclass
class CVResult:
    reports: dict
    predicted: dict
    fold_of: dict


def _cv_fold(args):
    fold, train_ids, test_ids, fms, hyps, n_trees, m_try, seed = args
    if set(train_ids) & set(test_ids):
        raise AssertionError(f"fold {fold}: subjects in both train and test")
    model = train_stager({s: fms[s] for s in train_ids}, hyps, n_trees, m_try,
                         seed=seed * 1000 + fold)
    return fold, {s: stage_recording(model, fms[s]) for s in test_ids}


def run_cv(fms, hypnograms, plan, n_trees=500, m_try=None, seed=0, n_jobs=1):
    """Subject-level cross-validated staging.

    Returns per-cohort StageReports (plus ``ALL``) and the predicted
    hypnogram of every subject from the fold that held it out.
    """
    subjects = sorted(fms)
    if sorted(plan.assignments) != subjects:
        raise ArgumentError("fold plan and dataset subjects differ")
    jobs = []
    for fold in range(plan.k):
        tr, te = plan.split(fold)
        if te:
            jobs.append((fold, tr, te, fms, hypnograms, n_trees, m_try, seed))
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            results = list(ex.map(_cv_fold, jobs))
    else:
        results = [_cv_fold(j) for j in jobs]
    predicted = {}
    for _, preds in sorted(results, key=lambda r: r[0]):
        predicted.update(preds)
    truth = {s: hypnograms[s].aligned(len(fms[s])) for s in subjects}
    reports = {"ALL": stage_metrics(predicted, truth, "ALL")}
    for cohort in sorted(set(plan.strata.values())):
        ids = [s for s in subjects if plan.strata[s] == cohort]
        reports[cohort] = stage_metrics({s: predicted[s] for s in ids}, {s: truth[s] for s in ids}, cohort)
    return CVResult(reports, predicted, dict(plan.assignments))
