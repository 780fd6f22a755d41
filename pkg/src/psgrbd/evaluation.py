"""Manual-versus-automatic agreement of subject metrics and report emission."""

import csv
import hashlib
import io
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import UndefinedError
from .psg_io import STAGES
from .rbd import METRIC_FIELDS

SUMMARY_ROWS = ("motor_activity", "stream", "atonia_index", "rf_established", "rf_additional")
SOURCES = ("manual", "automatic")


def pearson_r(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ac, bc = a - a.mean(), b - b.mean()
    den = math.sqrt(float((ac * ac).sum() * (bc * bc).sum()))
    if den == 0.0:
        return float("nan")
    return float(np.clip((ac * bc).sum() / den, -1.0, 1.0))


def metric_correlation(manual, auto, names=METRIC_FIELDS):
    """Pearson r per metric between two stagings of the same subjects.

    Subjects missing a metric in either list are dropped for that metric.

    Returns
    -------
    dict
        ``name -> (r, n)``.

    Raises
    ------
    UndefinedError
        If fewer than three subjects remain for some metric.
    """
    a = {m.subject_id: m for m in manual}
    b = {m.subject_id: m for m in auto}
    common = sorted(set(a) & set(b))
    out = {}
    for name in names:
        pairs = [(getattr(a[s], name), getattr(b[s], name)) for s in common]
        pairs = [(x, y) for x, y in pairs if not (math.isnan(x) or math.isnan(y))]
        if len(pairs) < 3:
            raise UndefinedError(f"{name}: only {len(pairs)} paired subjects (need 3)")
        x, y = zip(*pairs)
        out[name] = (pearson_r(x, y), len(pairs))
    return out


# --- report ------------------------------------------------------------------------

@dataclass
class RunArtifacts:
    stage_reports: dict = field(default_factory=dict)
    manual_metrics: list = field(default_factory=list)
    auto_metrics: list = field(default_factory=list)
    detection: list = field(default_factory=list)
    importance: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)


def _csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerows(rows)
    return buf.getvalue()


def _num(v):
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def confusion_csv(cm):
    rows = [["truth\\pred", *STAGES, "total"]]
    for i, s in enumerate(STAGES):
        rows.append([s, *[int(v) for v in cm[i]], int(cm[i].sum())])
    return _csv(rows)


def correlation_csv(corr):
    return _csv([["metric", "r", "n"]] + [[k, _num(r), n] for k, (r, n) in corr.items()])


def summary_csv(detection):
    by_key = {(d.variant, d.staging_source): d for d in detection}
    rows = [["method", "staging", "accuracy", "sensitivity", "specificity"]]
    names = {"atonia_index": "atonia_index_rem", "rf_established": "established",
             "rf_additional": "additional"}
    for row in SUMMARY_ROWS:
        for src in SOURCES:
            d = by_key.get((names.get(row, row), src))
            vals = [d.accuracy, d.sensitivity, d.specificity] if d else [None] * 3
            rows.append([row, src, *[_num(v) for v in vals]])
    return _csv(rows)


def importance_csv(importance):
    items = sorted(importance.items(), key=lambda kv: (-kv[1], kv[0]))
    return _csv([["feature", "delta_error"]] + [[k, _num(v)] for k, v in items])


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "psgrbd"
    plt.rcParams["svg.fonttype"] = "none"
    return plt


def _svg(fig):
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    _pyplot().close(fig)
    return buf.getvalue()


def confusion_svg(cm, title):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4.5, 4))
    norm = cm / np.maximum(cm.sum(axis=1, keepdims=True), 1)
    ax.imshow(norm, cmap="Blues", vmin=0, vmax=1)
    for i in range(len(STAGES)):
        for j in range(len(STAGES)):
            ax.text(j, i, f"{norm[i, j]:.2f}", ha="center", va="center", fontsize=8)
    ax.set_xticks(range(len(STAGES)), STAGES)
    ax.set_yticks(range(len(STAGES)), STAGES)
    ax.set_xlabel("predicted")
    ax.set_ylabel("annotated")
    ax.set_title(title)
    return _svg(fig)


def scatter_svg(manual, auto, corr):
    plt = _pyplot()
    names = list(corr)
    cols = 3
    rows = (len(names) + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(3.2 * cols, 3.0 * rows), squeeze=False)
    a = {m.subject_id: m for m in manual}
    b = {m.subject_id: m for m in auto}
    common = sorted(set(a) & set(b))
    for ax, name in zip(axes.flat, names):
        x = [getattr(a[s], name) for s in common]
        y = [getattr(b[s], name) for s in common]
        colors = ["tab:red" if a[s].cohort == "RBD" else "tab:blue" for s in common]
        ax.scatter(x, y, s=10, c=colors)
        ax.set_title(f"{name} (r={corr[name][0]:.2f})", fontsize=8)
        ax.set_xlabel("manual", fontsize=7)
        ax.set_ylabel("automatic", fontsize=7)
    for ax in list(axes.flat)[len(names):]:
        ax.axis("off")
    fig.tight_layout()
    return _svg(fig)


def bar_svg(values, title, ylabel):
    plt = _pyplot()
    items = sorted(values.items(), key=lambda kv: (-kv[1], kv[0]))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(range(len(items)), [v for _, v in items], color="tab:gray")
    ax.set_xticks(range(len(items)), [k for k, _ in items], rotation=45, ha="right", fontsize=7)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    return _svg(fig)


def emit_report(out_dir, art):
    """Write CSV tables, SVG views of them, and a hash manifest.

    Layout: ``staging/``, ``metrics/``, ``detection/`` and ``manifest.txt``
    listing ``sha256  relative/path`` for every other file, sorted by path.
    Contents depend only on ``art``.
    """
    from .rbd import metrics_to_csv

    files = {}
    for cohort, rep in sorted(art.stage_reports.items()):
        files[f"staging/confusion_{cohort}.csv"] = confusion_csv(rep.confusion)
        files[f"staging/confusion_{cohort}.svg"] = confusion_svg(rep.confusion, f"staging ({cohort})")
        files[f"staging/report_{cohort}.csv"] = rep.to_csv()
        files[f"staging/report_{cohort}.txt"] = rep.to_text()

    if art.manual_metrics or art.auto_metrics:
        files["metrics/subject_metrics.csv"] = metrics_to_csv(list(art.manual_metrics) + list(art.auto_metrics))
    if art.manual_metrics and art.auto_metrics:
        corr = {}
        for name in METRIC_FIELDS:
            try:
                corr.update(metric_correlation(art.manual_metrics, art.auto_metrics, (name,)))
            except UndefinedError:
                corr[name] = (float("nan"), 0)
        files["metrics/correlation.csv"] = correlation_csv(corr)
        files["metrics/correlation.svg"] = scatter_svg(art.manual_metrics, art.auto_metrics, corr)

    if art.detection:
        files["detection/summary.csv"] = summary_csv(art.detection)
        acc = {f"{d.variant}/{d.staging_source}": d.accuracy for d in art.detection
               if not math.isnan(d.accuracy)}
        files["detection/summary.svg"] = bar_svg(acc, "cross-validated detection", "accuracy")
        pred_rows = [["method", "staging", "subject_id", "label", "rbd_votes"]]
        for d in art.detection:
            for s in sorted(d.predictions):
                lab, p = d.predictions[s]
                pred_rows.append([d.variant, d.staging_source, s, lab, _num(p)])
            for s in d.excluded:
                pred_rows.append([d.variant, d.staging_source, s, "EXCLUDED", ""])
        files["detection/predictions.csv"] = _csv(pred_rows)
    if art.importance:
        files["detection/importance.csv"] = importance_csv(art.importance)
        files["detection/importance.svg"] = bar_svg(art.importance, "permutation importance",
                                                    "delta error")
    if art.notes:
        files["notes.txt"] = "\n".join(art.notes) + "\n"

    manifest = []
    for rel in sorted(files):
        data = files[rel].encode("utf-8")
        path = os.path.join(out_dir, rel)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(data)
        manifest.append(f"{hashlib.sha256(data).hexdigest()}  {rel}")
    text = "\n".join(manifest) + "\n"
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return text
