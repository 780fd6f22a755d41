"""Full-night REM-without-atonia and sleep-architecture metrics, and the
subject-level RBD detector built on them.

All EMG inputs are the preprocessed chin signal in µV.  The hypnogram is
aligned to the complete 30-s epochs of the signal; 1-s windows ``i`` belong
to epoch ``i // 30``.  Missing metrics are NaN.
"""

import csv
import io
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import dsp, emg as emgmod, features
from . import forest as fst
from .errors import ArgumentError, MissingMetricError, ParseError
from .psg_io import EPOCH_LEN, UNSCORED

NREM = ("N1", "N2", "N3")
SLEEP = ("N1", "N2", "N3", "REM")
RATIO_EPS = 0.01
METRIC_FIELDS = ("atonia_index_rem", "stream", "motor_activity", "ai_ratio_n2", "ai_ratio_n3",
                 "fe_ratio_n2", "fe_ratio_n3", "n3_ratio", "sleep_efficiency")
VARIANTS = {
    "established": (("atonia_index_rem", "stream", "motor_activity"), 2),
    "additional": (METRIC_FIELDS, 3),
}
DETECTOR_CLASSES = ("HC", "RBD")
MIN_NREM_EPOCHS = 10


@dataclass(frozen=True)
class MetricParams:
    atonia_span_s: float = 60.0
    atonia_corrected: bool = True
    stream_percentile: float = 95.0
    motor_threshold: float = 2.0
    motor_min_duration_s: float = 0.3
    motor_inter_event_s: float = 0.5
    motor_baseline_window_s: float = 1800.0
    ratio_eps: float = RATIO_EPS


def _epoch_stages(hyp, n_epochs):
    return np.array(hyp.aligned(n_epochs).stages, dtype=object)


def _n_epochs(emg, rate):
    return int(len(emg) // int(round(EPOCH_LEN * rate)))


def _window_stages(hyp, n_windows, per_epoch):
    ep = _epoch_stages(hyp, n_windows // per_epoch + 1)
    return ep[np.arange(n_windows) // per_epoch]


def stage_window_amplitudes(emg, rate, hyp, corrected=True, span_s=60.0):
    """Per-second amplitudes of the whole night and the stage of every window."""
    n = _n_epochs(emg, rate)
    x = np.asarray(emg, dtype=np.float64)[: int(round(n * EPOCH_LEN * rate))]
    amp = emgmod.window_amplitudes(x, rate)
    if corrected:
        amp = emgmod.correct_amplitudes(amp, span_s)
    return amp, _window_stages(hyp, amp.shape[0], int(EPOCH_LEN))


def atonia_index(emg, rate, hyp, stage="REM", corrected=True, span_s=60.0):
    """Atonia index over all 1-s windows of ``stage`` (NaN if the stage is absent)."""
    amp, st = stage_window_amplitudes(emg, rate, hyp, corrected, span_s)
    sel = amp[st == stage]
    if sel.size == 0:
        return float("nan")
    return float(emgmod.atonia_ratio(sel))


def stream_metric(emg, rate, hyp, percentile=95.0):
    """Share of REM 1-s windows whose variance does not exceed the NREM threshold.

    The threshold is the given percentile of NREM window variances.  Needs
    at least one REM and ten NREM epochs, else NaN.
    """
    n = _n_epochs(emg, rate)
    ep = _epoch_stages(hyp, n)
    if (ep == "REM").sum() < 1 or np.isin(ep, NREM).sum() < MIN_NREM_EPOCHS:
        return float("nan")
    x = np.asarray(emg, dtype=np.float64)[: int(round(n * EPOCH_LEN * rate))]
    var = emgmod.window_variances(x, rate)
    st = _window_stages(hyp, var.shape[0], int(EPOCH_LEN))
    thr = np.percentile(var[np.isin(st, NREM)], percentile)
    return float((var[st == "REM"] <= thr).mean())


def motor_activity(emg, rate, hyp, params=MetricParams()):
    """Fraction of REM time covered by detected motor-activity events."""
    n = _n_epochs(emg, rate)
    x = np.asarray(emg, dtype=np.float64)[: int(round(n * EPOCH_LEN * rate))]
    mask, env_rate = emgmod.motor_mask(
        x, rate, params.motor_threshold, params.motor_min_duration_s, params.motor_inter_event_s,
        params.motor_baseline_window_s)
    per_epoch = int(round(EPOCH_LEN * env_rate))
    st = _window_stages(hyp, mask.shape[0], per_epoch)
    rem = st == "REM"
    if not rem.any():
        return float("nan")
    return float(mask[rem].mean())


def epoch_fractal_exponents(emg, rate):
    """Fractal exponent of every complete 30-s epoch."""
    n = _n_epochs(emg, rate)
    x = np.asarray(emg, dtype=np.float64)[: int(round(n * EPOCH_LEN * rate))]
    ep = x.reshape(n, -1)
    f, p = dsp.psd(ep, rate, window_s=4.0)
    return features.fractal_exponent(f, p)


def fractal_exponent_mean(emg, rate, hyp, stage, exponents=None):
    fe = epoch_fractal_exponents(emg, rate) if exponents is None else exponents
    st = _epoch_stages(hyp, fe.shape[0])
    sel = fe[st == stage]
    return float(sel.mean()) if sel.size else float("nan")


def stage_ratio(value, rem_value, eps=RATIO_EPS):
    """``(value + eps) / (rem_value + eps)``; NaN if either side is missing."""
    if math.isnan(value) or math.isnan(rem_value):
        return float("nan")
    den = rem_value + eps
    if den == 0:
        return float("nan")
    return float((value + eps) / den)


def sleep_architecture(hyp):
    """``(n3_ratio, sleep_efficiency)``; n3_ratio is NaN without sleep."""
    st = np.array([s for s in hyp.stages if s != UNSCORED], dtype=object)
    if st.size == 0:
        raise ArgumentError("hypnogram has no scored epochs")
    sleep = np.isin(st, SLEEP).sum()
    n3 = float((st == "N3").sum() / sleep) if sleep else float("nan")
    return n3, float(sleep / st.size)


@dataclass
class SubjectMetrics:
    subject_id: str
    cohort: str
    staging_source: str
    atonia_index_rem: float
    stream: float
    motor_activity: float
    ai_ratio_n2: float
    ai_ratio_n3: float
    fe_ratio_n2: float
    fe_ratio_n3: float
    n3_ratio: float
    sleep_efficiency: float

    def vector(self, names=METRIC_FIELDS):
        return np.array([getattr(self, n) for n in names], dtype=np.float64)

    def missing(self, names=METRIC_FIELDS):
        return [n for n in names if math.isnan(getattr(self, n))]


@dataclass
class EmgSummary:
    """Hypnogram-independent EMG quantities of one night.

    Attributes
    ----------
    amplitudes : ndarray
        1-s mean rectified amplitudes (noise-corrected if configured).
    variances : ndarray
        1-s window variances.
    motor : ndarray of bool
        Motor-event mask on the envelope grid.
    env_rate : float
    fractal : ndarray
        Fractal exponent of every 30-s epoch.
    """

    amplitudes: np.ndarray
    variances: np.ndarray
    motor: np.ndarray
    env_rate: float
    fractal: np.ndarray

    @property
    def n_epochs(self):
        return self.fractal.shape[0]


def summarize_emg(emg, rate, params=MetricParams()):
    n = _n_epochs(emg, rate)
    x = np.asarray(emg, dtype=np.float64)[: int(round(n * EPOCH_LEN * rate))]
    amp = emgmod.window_amplitudes(x, rate)
    if params.atonia_corrected:
        amp = emgmod.correct_amplitudes(amp, params.atonia_span_s)
    mask, env_rate = emgmod.motor_mask(
        x, rate, params.motor_threshold, params.motor_min_duration_s, params.motor_inter_event_s,
        params.motor_baseline_window_s)
    return EmgSummary(amp, emgmod.window_variances(x, rate), mask, env_rate,
                      epoch_fractal_exponents(x, rate))


def metrics_from_summary(subject_id, cohort, summary, hyp, staging_source, params=MetricParams()):
    """All subject metrics from an :class:`EmgSummary` and a hypnogram."""
    if staging_source not in ("manual", "automatic"):
        raise ArgumentError(f"staging_source must be manual or automatic, got {staging_source!r}")
    n = summary.n_epochs
    hyp = hyp.aligned(n)
    ep = _epoch_stages(hyp, n)
    win = _window_stages(hyp, summary.amplitudes.shape[0], int(EPOCH_LEN))
    nan = float("nan")

    def ai(stage):
        sel = summary.amplitudes[win == stage]
        return float(emgmod.atonia_ratio(sel)) if sel.size else nan

    def fe(stage):
        sel = summary.fractal[ep == stage]
        return float(sel.mean()) if sel.size else nan

    if (ep == "REM").any() and np.isin(ep, NREM).sum() >= MIN_NREM_EPOCHS:
        thr = np.percentile(summary.variances[np.isin(win, NREM)], params.stream_percentile)
        stream = float((summary.variances[win == "REM"] <= thr).mean())
    else:
        stream = nan
    mst = _window_stages(hyp, summary.motor.shape[0], int(round(EPOCH_LEN * summary.env_rate)))
    motor = float(summary.motor[mst == "REM"].mean()) if (mst == "REM").any() else nan

    ai_rem = ai("REM")
    n3, eff = sleep_architecture(hyp)
    eps = params.ratio_eps
    return SubjectMetrics(
        subject_id=subject_id, cohort=cohort, staging_source=staging_source,
        atonia_index_rem=ai_rem, stream=stream, motor_activity=motor,
        ai_ratio_n2=stage_ratio(ai("N2"), ai_rem, eps),
        ai_ratio_n3=stage_ratio(ai("N3"), ai_rem, eps),
        fe_ratio_n2=stage_ratio(fe("N2"), fe("REM"), eps),
        fe_ratio_n3=stage_ratio(fe("N3"), fe("REM"), eps),
        n3_ratio=n3, sleep_efficiency=eff)


def assemble(subject_id, cohort, emg, rate, hyp, staging_source, params=MetricParams()):
    """All subject metrics from the chin EMG and a (manual or automatic) hypnogram."""
    return metrics_from_summary(subject_id, cohort, summarize_emg(emg, rate, params), hyp,
                                staging_source, params)


# --- persistence ------------------------------------------------------------------

_COLUMNS = tuple(f.name for f in fields(SubjectMetrics))


def metrics_to_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_COLUMNS)
    for m in rows:
        d = asdict(m)
        w.writerow([d[c] if c in ("subject_id", "cohort", "staging_source")
                    else ("" if math.isnan(d[c]) else repr(float(d[c]))) for c in _COLUMNS])
    return buf.getvalue()


def metrics_from_csv(text):
    reader = csv.reader(text.splitlines())
    header = tuple(next(reader, ()))
    if header != _COLUMNS:
        raise ParseError("unexpected SubjectMetrics columns", 0)
    out = []
    for lineno, r in enumerate(reader, start=2):
        if not r:
            continue
        if len(r) != len(_COLUMNS):
            raise ParseError(f"expected {len(_COLUMNS)} fields", lineno)
        vals = r[:3] + [float(v) if v else float("nan") for v in r[3:]]
        out.append(SubjectMetrics(*vals))
    return out


# --- detector ---------------------------------------------------------------------

def _variant(variant):
    if variant not in VARIANTS:
        raise ArgumentError(f"unknown detector variant {variant!r}")
    return VARIANTS[variant]


def _usable(metrics, names):
    return [m for m in metrics if not m.missing(names)]


def train_detector(metrics, variant="additional", seed=0, n_trees=500, n_jobs=1):
    """RBD/HC forest on the chosen metric subset; subjects with missing values are skipped."""
    names, m_try = _variant(variant)
    rows = _usable(metrics, names)
    labels = [m.cohort for m in rows]
    for c in DETECTOR_CLASSES:
        if labels.count(c) < 2:
            raise ArgumentError(f"need at least 2 {c} subjects with complete metrics")
    X = np.array([m.vector(names) for m in rows])
    return fst.train(X, labels, DETECTOR_CLASSES, n_trees=n_trees, m_try=m_try, seed=seed,
                     schema_hash=detector_schema_hash(variant), feature_names=names, n_jobs=n_jobs)


def detector_schema_hash(variant):
    names, _ = _variant(variant)
    return features.FeatureSchema.from_names(names, "psgrbd-metrics-1").hash


def detect(model, m):
    """``(label, RBD vote fraction)`` for one subject."""
    miss = m.missing(model.feature_names)
    if miss:
        raise MissingMetricError(miss)
    labels, p = fst.predict(model, m.vector(model.feature_names)[None, :])
    return labels[0], float(p[0, model.classes.index("RBD")])


@dataclass
class DetectionResult:
    variant: str
    staging_source: str
    accuracy: float
    sensitivity: float
    specificity: float
    predictions: dict
    excluded: list


def detector_cv(metrics, plan, variant="additional", seed=0, n_trees=500):
    """Subject-level cross-validated detection using the folds of ``plan``."""
    names, _ = _variant(variant)
    by_id = {m.subject_id: m for m in metrics}
    excluded = sorted(s for s, m in by_id.items() if m.missing(names))
    preds = {}
    for fold in range(plan.k):
        tr, te = plan.split(fold)
        if set(tr) & set(te):
            raise AssertionError(f"fold {fold}: subjects in both train and test")
        te = [s for s in te if s in by_id and s not in excluded]
        if not te:
            continue
        model = train_detector([by_id[s] for s in tr if s in by_id], variant,
                               seed=seed * 1000 + fold, n_trees=n_trees)
        for s in te:
            preds[s] = detect(model, by_id[s])
    truth = {s: by_id[s].cohort for s in preds}
    tp = sum(1 for s in preds if preds[s][0] == "RBD" and truth[s] == "RBD")
    tn = sum(1 for s in preds if preds[s][0] == "HC" and truth[s] == "HC")
    pos = sum(1 for s in truth if truth[s] == "RBD")
    neg = len(truth) - pos
    nan = float("nan")
    source = metrics[0].staging_source if metrics else ""
    return DetectionResult(variant, source, (tp + tn) / len(preds) if preds else nan,
                           tp / pos if pos else nan, tn / neg if neg else nan, preds, excluded)


def single_metric_cv(metrics, plan, name, seed=0):
    """Cross-validated one-threshold classifier on a single metric.

    Each fold fits a depth-1 split (one tree, no bagging randomness beyond
    the seed) and applies it to the held-out subjects, giving the
    single-metric rows of the detection summary.
    """
    by_id = {m.subject_id: m for m in metrics}
    excluded = sorted(s for s, m in by_id.items() if m.missing((name,)))
    preds = {}
    for fold in range(plan.k):
        tr, te = plan.split(fold)
        tr = [s for s in tr if s in by_id and s not in excluded]
        te = [s for s in te if s in by_id and s not in excluded]
        if not te:
            continue
        x = np.array([getattr(by_id[s], name) for s in tr])
        y = np.array([by_id[s].cohort == "RBD" for s in tr])
        thr, rbd_above = _best_threshold(x, y)
        for s in te:
            v = getattr(by_id[s], name)
            is_rbd = (v > thr) if rbd_above else (v <= thr)
            preds[s] = ("RBD" if is_rbd else "HC", float(is_rbd))
    truth = {s: by_id[s].cohort for s in preds}
    tp = sum(1 for s in preds if preds[s][0] == "RBD" and truth[s] == "RBD")
    tn = sum(1 for s in preds if preds[s][0] == "HC" and truth[s] == "HC")
    pos = sum(1 for s in truth if truth[s] == "RBD")
    neg = len(truth) - pos
    nan = float("nan")
    source = metrics[0].staging_source if metrics else ""
    return DetectionResult(name, source, (tp + tn) / len(preds) if preds else nan,
                           tp / pos if pos else nan, tn / neg if neg else nan, preds, excluded)


def _best_threshold(x, y):
    """Threshold and direction maximising training accuracy (midpoints, first best wins)."""
    if x.size == 0:
        raise ArgumentError("no training subjects for the threshold classifier")
    order = np.argsort(x, kind="stable")
    xs = x[order]
    cand = np.concatenate([[xs[0] - 1.0], (xs[:-1] + xs[1:]) / 2.0])
    best = (-1.0, 0.0, True)
    for t in cand:
        for above in (True, False):
            pred = (x > t) if above else (x <= t)
            acc = float((pred == y).mean())
            if acc > best[0]:
                best = (acc, float(t), above)
    return best[1], best[2]
