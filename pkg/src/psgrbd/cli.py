"""Command-line interface.

Every subcommand accepts ``--seed``, ``--config``, ``--out`` and ``--jobs``.
Exit codes: 0 success, 1 data error, 2 configuration error, 3 internal
assertion failure.
"""

import argparse
import logging
import os
import sys

import numpy as np

from . import pipeline, rbd, staging, synth
from . import forest as fst
from ._backend import BACKEND
from .config import defaults, load_config
from .errors import ConfigError, PsgError
from .evaluation import RunArtifacts, emit_report
from .psg_io import read_hypnogram, write_edf, write_hypnogram

EXIT_OK, EXIT_DATA, EXIT_CONFIG, EXIT_INTERNAL = 0, 1, 2, 3

log = logging.getLogger("psgrbd")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=None, help="random seed (overrides the config)")
    p.add_argument("--config", default=None, help="key=value configuration file")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--jobs", type=int, default=None, help="worker processes (results do not depend on it)")
    return p


def build_parser():
    common = _common()
    parser = _Parser(prog="psgrbd", description="Automated sleep staging and RBD detection from PSG.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", parents=[common], help="parse EDF + hypnogram pairs into a store")
    p.add_argument("--manifest", help="subject_id,cohort,edf_path,hypnogram_path lines")

    p = sub.add_parser("extract", parents=[common], help="compute per-epoch features for a store")
    p.add_argument("--store", required=True)

    p = sub.add_parser("stage", parents=[common], help="cross-validated staging, or apply a stager model")
    p.add_argument("--store", required=True)
    p.add_argument("--model", help="apply this stager instead of running cross-validation")
    p.add_argument("--save-model", help="also train a stager on every subject and save it here")

    p = sub.add_parser("metrics", parents=[common], help="RSWA and architecture metrics per subject")
    p.add_argument("--store", required=True)
    p.add_argument("--hypnograms", help="directory of predicted hypnograms (<subject>.txt)")

    p = sub.add_parser("detect", parents=[common], help="RBD detection from subject metrics")
    p.add_argument("--metrics", required=True, help="SubjectMetrics CSV")
    p.add_argument("--variant", choices=sorted(rbd.VARIANTS), default="additional")
    p.add_argument("--model", help="apply this detector instead of cross-validating")
    p.add_argument("--save-model", help="also train a detector on every subject and save it here")

    p = sub.add_parser("evaluate", parents=[common], help="emit the report for a staged and scored store")
    p.add_argument("--store", required=True)
    p.add_argument("--hypnograms", required=True, help="directory of predicted hypnograms")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic cohort (EDF + hypnograms)")
    p.add_argument("--n-hc", type=int)
    p.add_argument("--n-rbd", type=int)
    p.add_argument("--hours", type=float)

    p = sub.add_parser("inspect-model", parents=[common], help="describe a model file")
    p.add_argument("model")

    p = sub.add_parser("pipeline", parents=[common], help="ingest, extract, stage, score, detect and report")
    p.add_argument("--manifest", help="dataset manifest (else dataset.manifest from the config)")
    return parser


def _config(args):
    cfg = load_config(args.config) if args.config else defaults()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.jobs is not None:
        over["jobs"] = args.jobs
    return cfg.with_overrides(**over) if over else cfg


def _need_out(args):
    if not args.out:
        raise ConfigError("--out is required")
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _cmd_ingest(args, cfg):
    manifest = args.manifest or cfg["dataset.manifest"]
    if not manifest:
        raise ConfigError("no manifest given (--manifest or dataset.manifest)")
    entries = pipeline.read_manifest(manifest)
    if not entries:
        print("no subjects in manifest", file=sys.stderr)
        return EXIT_DATA
    out = _need_out(args)
    failures = pipeline.ingest(entries, out, cfg, cfg["jobs"])
    print(f"ingested {len(entries) - len(failures)} of {len(entries)} subjects into {out}")
    for sid, err in failures:
        print(f"  {sid}: {err}", file=sys.stderr)
    return EXIT_DATA if failures else EXIT_OK


def _cmd_extract(args, cfg):
    res = pipeline.extract_store(args.store, cfg, args.out, cfg["jobs"])
    print(f"extracted features for {len(res)} subjects")
    return EXIT_OK


def _cmd_stage(args, cfg):
    out = _need_out(args)
    subjects = pipeline.load_subjects(args.store)
    fms = {s.subject_id: s.features for s in subjects}
    hyps = {s.subject_id: s.hypnogram for s in subjects}
    if args.model:
        model = fst.TrainedForest.load(args.model)
        pred = {sid: staging.stage_recording(model, fm) for sid, fm in fms.items()}
        pipeline.write_predictions(os.path.join(out, "hypnograms"), pred)
        print(f"staged {len(pred)} subjects")
        return EXIT_OK
    pipeline.check_folds(len(subjects), cfg)
    plan = fst.make_folds(sorted(fms), [s.cohort for s in sorted(subjects, key=lambda s: s.subject_id)],
                          cfg["folds"], cfg["seed"])
    cv = staging.run_cv(fms, hyps, plan, cfg["staging.n_trees"], cfg["staging.m_try"], cfg["seed"], cfg["jobs"])
    pipeline.write_predictions(os.path.join(out, "hypnograms"), cv.predicted)
    for cohort, rep in sorted(cv.reports.items()):
        pipeline._write_text(os.path.join(out, f"staging_{cohort}.csv"), rep.to_csv())
    print(cv.reports["ALL"].to_text(), end="")
    if args.save_model:
        model = staging.train_stager(fms, hyps, cfg["staging.n_trees"], cfg["staging.m_try"], cfg["seed"],
                                     cfg["jobs"])
        model.save(args.save_model)
    return EXIT_OK


def _metrics_for(store, hyp_dir, cfg):
    rows = []
    for s in pipeline.load_subjects(store):
        if hyp_dir:
            hyp = read_hypnogram(os.path.join(hyp_dir, f"{s.subject_id}.txt"))
            src = "automatic"
        else:
            hyp, src = s.hypnogram, "manual"
        rows.append(rbd.metrics_from_summary(s.subject_id, s.cohort, s.emg, hyp, src, cfg.metric_params))
    return rows


def _cmd_metrics(args, cfg):
    out = _need_out(args)
    rows = _metrics_for(args.store, args.hypnograms, cfg)
    name = "metrics_automatic.csv" if args.hypnograms else "metrics_manual.csv"
    pipeline._write_text(os.path.join(out, name), rbd.metrics_to_csv(rows))
    print(f"wrote {len(rows)} subject metric rows to {os.path.join(out, name)}")
    return EXIT_OK


def _cmd_detect(args, cfg):
    out = _need_out(args)
    with open(args.metrics, encoding="utf-8") as fh:
        rows = rbd.metrics_from_csv(fh.read())
    if args.model:
        model = fst.TrainedForest.load(args.model)
        lines = ["subject_id,staging_source,label,rbd_votes"]
        for m in rows:
            try:
                lab, p = rbd.detect(model, m)
                lines.append(f"{m.subject_id},{m.staging_source},{lab},{p!r}")
            except PsgError as exc:
                lines.append(f"{m.subject_id},{m.staging_source},MISSING,")
                print(f"{m.subject_id}: {exc}", file=sys.stderr)
        pipeline._write_text(os.path.join(out, "detections.csv"), "\n".join(lines) + "\n")
        return EXIT_OK
    results = []
    for src in sorted({m.staging_source for m in rows}):
        ms = [m for m in rows if m.staging_source == src]
        pipeline.check_folds(len(ms), cfg)
        plan = fst.make_folds([m.subject_id for m in ms], [m.cohort for m in ms], cfg["folds"], cfg["seed"])
        r = rbd.detector_cv(ms, plan, args.variant, cfg["seed"], cfg["detector.n_trees"])
        results.append(r)
        print(f"{src} {args.variant}: accuracy {r.accuracy:.3f} sensitivity {r.sensitivity:.3f} "
              f"specificity {r.specificity:.3f} (excluded {len(r.excluded)})")
    from .evaluation import summary_csv
    pipeline._write_text(os.path.join(out, "detection_summary.csv"), summary_csv(results))
    if args.save_model:
        # one row per subject: prefer manual staging when both sources are present
        src = "manual" if any(m.staging_source == "manual" for m in rows) else rows[0].staging_source
        fit = [m for m in rows if m.staging_source == src]
        rbd.train_detector(fit, args.variant, cfg["seed"], cfg["detector.n_trees"]).save(args.save_model)
    return EXIT_OK


def _cmd_evaluate(args, cfg):
    out = _need_out(args)
    subjects = pipeline.load_subjects(args.store)
    pipeline.check_folds(len(subjects), cfg)
    ids = [s.subject_id for s in subjects]
    pred = {sid: read_hypnogram(os.path.join(args.hypnograms, f"{sid}.txt")) for sid in ids}
    truth = {s.subject_id: s.hypnogram for s in subjects}
    pred = {sid: pred[sid].aligned(len(truth[sid])) for sid in ids}
    cohorts = {s.subject_id: s.cohort for s in subjects}
    reports = {"ALL": staging.stage_metrics(pred, truth, "ALL")}
    for c in sorted(set(cohorts.values())):
        sel = [s for s in ids if cohorts[s] == c]
        reports[c] = staging.stage_metrics({s: pred[s] for s in sel}, {s: truth[s] for s in sel}, c)
    p = cfg.metric_params
    manual = [rbd.metrics_from_summary(s.subject_id, s.cohort, s.emg, s.hypnogram, "manual", p) for s in subjects]
    auto = [rbd.metrics_from_summary(s.subject_id, s.cohort, s.emg, pred[s.subject_id], "automatic", p)
            for s in subjects]
    art = RunArtifacts(stage_reports=reports, manual_metrics=manual, auto_metrics=auto)
    plan = fst.make_folds(ids, [cohorts[s] for s in ids], cfg["folds"], cfg["seed"])
    for ms in (manual, auto):
        for name in ("motor_activity", "stream", "atonia_index_rem"):
            art.detection.append(rbd.single_metric_cv(ms, plan, name, cfg["seed"]))
        for variant in ("established", "additional"):
            art.detection.append(rbd.detector_cv(ms, plan, variant, cfg["seed"], cfg["detector.n_trees"]))
    manifest = emit_report(os.path.join(out, "report"), art)
    print(f"report written ({len(manifest.splitlines())} files)")
    return EXIT_OK


def _cmd_synth(args, cfg):
    out = _need_out(args)
    n_hc = cfg["synth.n_hc"] if args.n_hc is None else args.n_hc
    n_rbd = cfg["synth.n_rbd"] if args.n_rbd is None else args.n_rbd
    hours = cfg["synth.hours"] if args.hours is None else args.hours
    lines = []
    for sid, profile in synth.generate_cohort(n_hc, n_rbd, hours, cfg["seed"], cfg["synth.rate"]):
        rec, hyp = synth.generate_subject(profile)
        os.makedirs(os.path.join(out, "edf"), exist_ok=True)
        os.makedirs(os.path.join(out, "hypnograms"), exist_ok=True)
        with open(os.path.join(out, "edf", f"{sid}.edf"), "wb") as fh:
            fh.write(write_edf(rec, patient=sid, recording="synthetic"))
        write_hypnogram(os.path.join(out, "hypnograms", f"{sid}.txt"), hyp, "manual")
        lines.append(f"{sid},{profile.cohort},edf/{sid}.edf,hypnograms/{sid}.txt")
    pipeline._write_text(os.path.join(out, "manifest.csv"), "\n".join(lines) + "\n")
    print(f"generated {len(lines)} subjects in {out}")
    return EXIT_OK


def _cmd_inspect(args, cfg):
    m = fst.TrainedForest.load(args.model)
    sizes = m.tree_sizes()
    print(f"classes      {', '.join(m.classes)}")
    print(f"trees        {m.n_trees}")
    print(f"m_try        {m.m_try}")
    print(f"seed         {m.seed}")
    print(f"schema hash  {m.schema_hash}")
    print(f"features     {m.M}")
    print(f"nodes/tree   mean {sizes.mean():.1f}, min {sizes.min()}, max {sizes.max()}")
    print(f"oob accuracy {m.oob_accuracy:.4f}" if not np.isnan(m.oob_accuracy) else "oob accuracy n/a")
    print(f"digest       {m.digest()}")
    return EXIT_OK


def _cmd_pipeline(args, cfg):
    manifest = args.manifest or cfg["dataset.manifest"]
    if not manifest:
        raise ConfigError("no manifest given (--manifest or dataset.manifest)")
    if not os.path.exists(manifest):
        raise ConfigError(f"manifest {manifest} does not exist")
    entries = pipeline.read_manifest(manifest)
    if not entries:
        print("no subjects in manifest", file=sys.stderr)
        return EXIT_DATA
    out = _need_out(args)
    text = pipeline.run_pipeline(entries, out, cfg, cfg["jobs"])
    print(f"pipeline finished; report manifest has {len(text.splitlines())} entries")
    return EXIT_OK


COMMANDS = {
    "ingest": _cmd_ingest, "extract": _cmd_extract, "stage": _cmd_stage, "metrics": _cmd_metrics,
    "detect": _cmd_detect, "evaluate": _cmd_evaluate, "synth": _cmd_synth,
    "inspect-model": _cmd_inspect, "pipeline": _cmd_pipeline,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        log.debug("kernel backend: %s", BACKEND)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AssertionError as exc:
        print(f"internal assertion failed: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except (PsgError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
