"""End-to-end orchestration shared by the command line and the test harness.

A *store* is a directory holding, per subject, the preprocessed montage
(``triplet.bin``), the manual hypnogram aligned to the signal
(``hypnogram.txt``) and, after extraction, ``features.bin`` and
``emg_summary.bin``.  ``subjects.csv`` lists subject ids and cohorts and
``quality.csv`` records per-subject data-quality counts.
"""

import csv
import io
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import binio, dsp, features, rbd, staging
from . import forest as fst
from .errors import ArgumentError, FoldCountError, ParseError, PsgError
from .evaluation import RunArtifacts, emit_report
from .features import FeatureMatrix
from .psg_io import (UNSCORED, MontageTriplet, read_edf, read_hypnogram, require_min_duration,
                     select_montage, write_hypnogram)

log = logging.getLogger(__name__)


# --- manifest ----------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    subject_id: str
    cohort: str
    edf_path: str
    hypnogram_path: str


def parse_manifest(text, base_dir=""):
    """``subject_id,cohort,edf_path,hypnogram_path`` lines; relative paths are
    resolved against ``base_dir``."""
    out, seen = [], set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 4 or not all(parts):
            raise ParseError(f"expected 'subject_id,cohort,edf_path,hypnogram_path', got {line!r}", lineno)
        sid, cohort, edf, hyp = parts
        if sid in seen:
            raise ParseError(f"duplicate subject id {sid!r}", lineno)
        seen.add(sid)
        out.append(ManifestEntry(sid, cohort, os.path.join(base_dir, edf), os.path.join(base_dir, hyp)))
    return out


def read_manifest(path):
    with open(path, encoding="utf-8") as fh:
        return parse_manifest(fh.read(), os.path.dirname(os.path.abspath(path)))


def check_folds(n_subjects, cfg):
    if cfg["folds"] > n_subjects:
        raise FoldCountError(f"folds={cfg['folds']} exceeds the {n_subjects} available subjects")


# --- per-subject processing ------------------------------------------------------------

def prepare(rec, hyp, cfg):
    """Montage, resampling and filtering; returns the triplet, aligned hypnogram and quality counts."""
    require_min_duration(rec)
    trip = dsp.apply_preprocessing(select_montage(rec, cfg.montage), **cfg.preprocessing)
    n_epochs = cfg.grid.n_epochs(len(trip.eeg))
    if n_epochs < 1:
        raise ArgumentError("recording shorter than one epoch")
    aligned = hyp.aligned(n_epochs)
    quality = {
        "n_epochs": n_epochs,
        "hypnogram_epochs": len(hyp),
        "dropped_hypnogram_epochs": max(0, len(hyp) - n_epochs),
        "padded_epochs": max(0, n_epochs - len(hyp)),
        "unscored_epochs": sum(1 for s in aligned.stages if s == UNSCORED),
        "unknown_labels": hyp.unknown,
        "montage": "|".join(trip.source_labels),
    }
    return trip, aligned, quality


@dataclass
class SubjectData:
    subject_id: str
    cohort: str
    features: FeatureMatrix
    hypnogram: object
    emg: rbd.EmgSummary
    quality: dict = field(default_factory=dict)


def extract(subject_id, cohort, trip, hyp, cfg, quality=None):
    p = cfg.metric_params
    motor = dict(threshold_factor=p.motor_threshold, min_duration_s=p.motor_min_duration_s,
                 inter_event_s=p.motor_inter_event_s, baseline_window_s=p.motor_baseline_window_s)
    fm = features.extract_all(trip, cfg.grid, subject_id, p.atonia_span_s, motor)
    fm.staging_source = "manual"
    q = dict(quality or {})
    q["imputed_values"] = int(sum(fm.imputed.values()))
    return SubjectData(subject_id, cohort, fm, hyp.aligned(len(fm)), rbd.summarize_emg(trip.emg, trip.rate, p), q)


def process_recording(subject_id, cohort, rec, hyp, cfg):
    trip, aligned, quality = prepare(rec, hyp, cfg)
    return extract(subject_id, cohort, trip, aligned, cfg, quality)


# --- analysis --------------------------------------------------------------------------

@dataclass
class AnalysisResult:
    artifacts: RunArtifacts
    predicted: dict
    plan: fst.FoldPlan


def analyze(subjects, cfg, jobs=1):
    """Staging CV, metrics under both stagings, detection CV and importance."""
    subjects = sorted(subjects, key=lambda s: s.subject_id)
    check_folds(len(subjects), cfg)
    ids = [s.subject_id for s in subjects]
    by_id = {s.subject_id: s for s in subjects}
    seed = cfg["seed"]
    plan = fst.make_folds(ids, [s.cohort for s in subjects], cfg["folds"], seed)
    cv = staging.run_cv({s: by_id[s].features for s in ids}, {s: by_id[s].hypnogram for s in ids},
                        plan, cfg["staging.n_trees"], cfg["staging.m_try"], seed, jobs)
    params = cfg.metric_params
    manual, auto = [], []
    for s in ids:
        d = by_id[s]
        manual.append(rbd.metrics_from_summary(s, d.cohort, d.emg, d.hypnogram, "manual", params))
        auto.append(rbd.metrics_from_summary(s, d.cohort, d.emg, cv.predicted[s], "automatic", params))

    art = RunArtifacts(stage_reports=cv.reports, manual_metrics=manual, auto_metrics=auto)
    detectable = set(rbd.DETECTOR_CLASSES)
    if {m.cohort for m in manual} <= detectable and len({m.cohort for m in manual}) == 2:
        n_trees = cfg["detector.n_trees"]
        for ms in (manual, auto):
            for name in ("motor_activity", "stream", "atonia_index_rem"):
                art.detection.append(rbd.single_metric_cv(ms, plan, name, seed))
            for variant in ("established", "additional"):
                art.detection.append(rbd.detector_cv(ms, plan, variant, seed, n_trees))
        usable = [m for m in manual if not m.missing()]
        model = rbd.train_detector(usable, "additional", seed, n_trees)
        art.importance = fst.permutation_importance(
            model, np.array([m.vector() for m in usable]), [m.cohort for m in usable], seed,
            cfg["detector.importance_repeats"])
    else:
        art.notes.append("detection skipped: cohorts must be exactly HC and RBD")
    for ms in (manual, auto):
        for m in ms:
            miss = m.missing()
            if miss:
                art.notes.append(f"{m.subject_id} ({m.staging_source}): missing {', '.join(miss)}")
    for s in ids:
        n_imp = by_id[s].quality.get("imputed_values", 0)
        if n_imp:
            art.notes.append(f"{s}: {n_imp} non-finite feature values set to 0")
    return AnalysisResult(art, cv.predicted, plan)


# --- store -----------------------------------------------------------------------------

def _subject_dir(store, sid):
    return os.path.join(store, sid)


def save_triplet(path, trip, cohort):
    data = binio.dumps("triplet", 1, {"rate": trip.rate, "source_labels": list(trip.source_labels),
                                      "cohort": cohort},
                       {"eeg": trip.eeg.astype(np.float32), "eog": trip.eog.astype(np.float32),
                        "emg": trip.emg.astype(np.float32)})
    _write_bytes(path, data)


def load_triplet(path):
    with open(path, "rb") as fh:
        _, meta, a = binio.loads(fh.read(), kind="triplet")
    trip = MontageTriplet(a["eeg"].astype(np.float64), a["eog"].astype(np.float64),
                          a["emg"].astype(np.float64), meta["rate"], tuple(meta["source_labels"]))
    return trip, meta["cohort"]


def save_summary(path, s):
    _write_bytes(path, binio.dumps("emg-summary", 1, {"env_rate": s.env_rate},
                                   {"amplitudes": s.amplitudes, "variances": s.variances,
                                    "motor": s.motor.astype(np.uint8), "fractal": s.fractal}))


def load_summary(path):
    with open(path, "rb") as fh:
        _, meta, a = binio.loads(fh.read(), kind="emg-summary")
    return rbd.EmgSummary(a["amplitudes"], a["variances"], a["motor"].astype(bool), meta["env_rate"],
                          a["fractal"])


def _write_bytes(path, data):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(data)


def _write_text(path, text):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _csv_text(rows):
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


QUALITY_FIELDS = ("n_epochs", "hypnogram_epochs", "dropped_hypnogram_epochs", "padded_epochs",
                  "unscored_epochs", "unknown_labels", "imputed_values", "montage")


def write_quality(path, rows):
    table = [["subject_id", "status", *QUALITY_FIELDS, "error"]]
    for sid in sorted(rows):
        status, q, err = rows[sid]
        table.append([sid, status, *[q.get(k, "") for k in QUALITY_FIELDS], err])
    _write_text(path, _csv_text(table))


def read_quality(path):
    if not os.path.exists(path):
        return {}
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    out = {}
    for r in rows:
        q = {k: r[k] for k in QUALITY_FIELDS if r.get(k, "") != ""}
        for k in QUALITY_FIELDS[:-1]:
            if k in q:
                q[k] = int(q[k])
        out[r["subject_id"]] = (r["status"], q, r["error"])
    return out


def list_subjects(store):
    path = os.path.join(store, "subjects.csv")
    try:
        with open(path, encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError:
        raise ArgumentError(f"{store} is not an ingested store (no subjects.csv)") from None
    return [(r[0], r[1]) for r in rows[1:] if r]


def _ingest_one(args):
    entry, store, cfg = args
    try:
        rec = read_edf(entry.edf_path)
        hyp = read_hypnogram(entry.hypnogram_path)
        trip, aligned, quality = prepare(rec, hyp, cfg)
    except (PsgError, OSError) as exc:
        return entry.subject_id, entry.cohort, None, f"{type(exc).__name__}: {exc}"
    d = _subject_dir(store, entry.subject_id)
    save_triplet(os.path.join(d, "triplet.bin"), trip, entry.cohort)
    write_hypnogram(os.path.join(d, "hypnogram.txt"), aligned, "manual")
    return entry.subject_id, entry.cohort, quality, ""


def _map(fn, jobs_args, jobs):
    if jobs > 1 and len(jobs_args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, jobs_args))
    return [fn(a) for a in jobs_args]


def ingest(entries, store, cfg, jobs=1):
    """Parse and normalise every manifest entry into ``store``.

    Returns the list of ``(subject_id, error)`` failures; successful
    subjects are written regardless.
    """
    results = _map(_ingest_one, [(e, store, cfg) for e in entries], jobs)
    rows, ok, failures = {}, [], []
    for sid, cohort, quality, err in results:
        if err:
            rows[sid] = ("failed", {}, err)
            failures.append((sid, err))
        else:
            rows[sid] = ("ok", quality, "")
            ok.append((sid, cohort))
    os.makedirs(store, exist_ok=True)
    _write_text(os.path.join(store, "subjects.csv"),
                _csv_text([["subject_id", "cohort"]] + sorted([list(x) for x in ok])))
    write_quality(os.path.join(store, "quality.csv"), rows)
    return failures


def _extract_one(args):
    sid, store, out, cfg = args
    d = _subject_dir(store, sid)
    trip, cohort = load_triplet(os.path.join(d, "triplet.bin"))
    hyp = read_hypnogram(os.path.join(d, "hypnogram.txt"))
    data = extract(sid, cohort, trip, hyp, cfg)
    o = _subject_dir(out, sid)
    _write_bytes(os.path.join(o, "features.bin"), data.features.to_bytes())
    save_summary(os.path.join(o, "emg_summary.bin"), data.emg)
    return sid, data.quality.get("imputed_values", 0)


def extract_store(store, cfg, out=None, jobs=1):
    out = out or store
    subjects = list_subjects(store)
    results = _map(_extract_one, [(sid, store, out, cfg) for sid, _ in subjects], jobs)
    quality = read_quality(os.path.join(store, "quality.csv"))
    for sid, n_imp in results:
        status, q, err = quality.get(sid, ("ok", {}, ""))
        q["imputed_values"] = n_imp
        quality[sid] = (status, q, err)
    write_quality(os.path.join(out, "quality.csv"), quality)
    if os.path.abspath(out) != os.path.abspath(store):
        _write_text(os.path.join(out, "subjects.csv"),
                    _csv_text([["subject_id", "cohort"]] + [list(x) for x in subjects]))
    return results


def load_subjects(store, features_dir=None):
    features_dir = features_dir or store
    quality = read_quality(os.path.join(features_dir, "quality.csv"))
    out = []
    for sid, cohort in list_subjects(store):
        f = _subject_dir(features_dir, sid)
        try:
            with open(os.path.join(f, "features.bin"), "rb") as fh:
                fm = FeatureMatrix.from_bytes(fh.read())
            summary = load_summary(os.path.join(f, "emg_summary.bin"))
        except OSError:
            raise ArgumentError(f"subject {sid}: features missing; run extract first") from None
        hyp = read_hypnogram(os.path.join(_subject_dir(store, sid), "hypnogram.txt"))
        out.append(SubjectData(sid, cohort, fm, hyp.aligned(len(fm)), summary,
                               quality.get(sid, ("ok", {}, ""))[1]))
    return out


def write_predictions(out, predicted):
    os.makedirs(out, exist_ok=True)
    for sid in sorted(predicted):
        write_hypnogram(os.path.join(out, f"{sid}.txt"), predicted[sid], "automatic")


def run_pipeline(entries, out, cfg, jobs=1):
    """Ingest, extract, analyse and report; returns the report manifest text."""
    check_folds(len(entries), cfg)
    store = os.path.join(out, "store")
    failures = ingest(entries, store, cfg, jobs)
    if failures:
        sid, err = failures[0]
        raise PipelineError(f"ingest failed for subject {sid}: {err}", failures)
    extract_store(store, cfg, jobs=jobs)
    subjects = load_subjects(store)
    result = analyze(subjects, cfg, jobs)
    write_predictions(os.path.join(out, "hypnograms"), result.predicted)
    _write_text(os.path.join(out, "config.txt"), cfg.to_text())
    return emit_report(os.path.join(out, "report"), result.artifacts)


class PipelineError(PsgError):
    def __init__(self, message, failures=()):
        self.failures = list(failures)
        super().__init__(message)
