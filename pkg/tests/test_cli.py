import os

import pytest

from psgrbd import cli

SMALL = """folds=2
staging.n_trees=15
detector.n_trees=40
detector.importance_repeats=2
synth.n_hc=4
synth.n_rbd=4
synth.hours=2
"""


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.cfg"
    cfg.write_text(SMALL)
    assert cli.main(["synth", "--config", str(cfg), "--out", str(root / "sy"), "--seed", "5"]) == 0
    return root, cfg


def _run(*argv):
    return cli.main([str(a) for a in argv])


def test_help_and_unknown_flags(capsys):
    with pytest.raises(SystemExit) as exc:
        _run("pipeline", "--help")
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for flag in ("--seed", "--config", "--out", "--jobs", "--manifest"):
        assert flag in text
    with pytest.raises(SystemExit) as exc:
        _run("pipeline", "--bogus")
    assert exc.value.code == 2


def test_config_errors_exit_2(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("unknown.key=1\n")
    assert _run("synth", "--config", bad, "--out", tmp_path / "o") == 2
    assert _run("synth", "--config", tmp_path / "missing.cfg", "--out", tmp_path / "o") == 2
    assert _run("pipeline", "--out", tmp_path / "o") == 2


def test_fold_count_is_checked_before_compute(cohort, tmp_path):
    root, _ = cohort
    cfg = tmp_path / "k.cfg"
    cfg.write_text("folds=20\n")
    out = tmp_path / "run"
    assert _run("pipeline", "--config", cfg, "--manifest", root / "sy/manifest.csv", "--out", out) == 2
    assert not (out / "store").exists()


def test_ingest_exit_codes(cohort, tmp_path):
    root, cfg = cohort
    lines = (root / "sy/manifest.csv").read_text().splitlines()
    sy = root / "sy"
    good = tmp_path / "good.csv"
    good.write_text("\n".join(l.replace("edf/", f"{sy}/edf/").replace("hypnograms/", f"{sy}/hypnograms/")
                              for l in lines[:2]) + "\n")
    assert _run("ingest", "--config", cfg, "--manifest", good, "--out", tmp_path / "s1") == 0
    assert sorted(os.listdir(tmp_path / "s1")) == sorted(["hc001", "hc002", "quality.csv", "subjects.csv"])

    corrupt = tmp_path / "corrupt.edf"
    corrupt.write_bytes(b"0       garbage")
    mixed = tmp_path / "mixed.csv"
    first = good.read_text().splitlines()[0]
    mixed.write_text(first + f"\nbad1,RBD,{corrupt},{sy}/hypnograms/rbd001.txt\n")
    assert _run("ingest", "--config", cfg, "--manifest", mixed, "--out", tmp_path / "s2") == 1
    assert (tmp_path / "s2/subjects.csv").read_text().count("\n") == 2  # header + one subject
    assert "failed" in (tmp_path / "s2/quality.csv").read_text()

    empty = tmp_path / "empty.csv"
    empty.write_text("# nothing\n")
    assert _run("ingest", "--manifest", empty, "--out", tmp_path / "s3") == 1


def test_internal_assertion_exit_3(monkeypatch, tmp_path):
    def boom(args, cfg):
        raise AssertionError("leak")

    monkeypatch.setitem(cli.COMMANDS, "synth", boom)
    assert _run("synth", "--out", tmp_path) == 3


def test_pipeline_is_reproducible_across_jobs(cohort):
    root, cfg = cohort
    manifest = root / "sy/manifest.csv"
    assert _run("pipeline", "--config", cfg, "--manifest", manifest, "--out", root / "run1") == 0
    assert _run("pipeline", "--config", cfg, "--manifest", manifest, "--out", root / "run2",
                "--jobs", "2") == 0
    m1 = (root / "run1/report/manifest.txt").read_bytes()
    assert m1 == (root / "run2/report/manifest.txt").read_bytes()
    listed = [l.split("  ", 1)[1] for l in m1.decode().splitlines()]
    assert "detection/summary.csv" in listed and "staging/confusion_ALL.csv" in listed
    hyp = (root / "run1/hypnograms/hc001.txt").read_text()
    assert hyp.startswith("# epoch_len=30\n# source=automatic\n")


def test_subcommands_chain(cohort, capsys):
    root, cfg = cohort
    store = root / "run1/store"
    work = root / "steps"
    model = work / "stager.bin"
    assert _run("stage", "--config", cfg, "--store", store, "--out", work, "--save-model", model) == 0
    assert (work / "hypnograms/rbd004.txt").exists()
    assert _run("inspect-model", model) == 0
    assert "schema hash" in capsys.readouterr().out
    assert _run("stage", "--config", cfg, "--store", store, "--out", work / "applied", "--model", model) == 0

    assert _run("metrics", "--config", cfg, "--store", store, "--out", work) == 0
    assert _run("metrics", "--config", cfg, "--store", store, "--out", work,
                "--hypnograms", work / "hypnograms") == 0
    det = work / "detector.bin"
    assert _run("detect", "--config", cfg, "--metrics", work / "metrics_manual.csv", "--out", work,
                "--variant", "established", "--save-model", det) == 0
    assert _run("detect", "--config", cfg, "--metrics", work / "metrics_automatic.csv", "--out",
                work / "applied", "--model", det) == 0
    assert (work / "applied/detections.csv").read_text().count("\n") == 9

    assert _run("evaluate", "--config", cfg, "--store", store, "--hypnograms", work / "hypnograms",
                "--out", work) == 0
    assert (work / "report/manifest.txt").exists()


def test_extract_rerun_is_identical(cohort, tmp_path):
    root, cfg = cohort
    store = root / "run1/store"
    assert _run("extract", "--config", cfg, "--store", store, "--out", tmp_path / "f") == 0
    a = (tmp_path / "f/hc001/features.bin").read_bytes()
    assert a == (store / "hc001/features.bin").read_bytes()
