import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psgrbd import staging
from psgrbd.errors import ArgumentError, UndefinedError
from psgrbd.features import SCHEMA, FeatureMatrix
from psgrbd.forest import FoldPlan, make_folds
from psgrbd.psg_io import STAGES, Hypnogram

stage_lists = st.lists(st.sampled_from(STAGES), min_size=2, max_size=60)


def test_kappa_hand_cases():
    a = ["W", "N1", "N2", "REM"]
    assert staging.cohens_kappa(a, a) == 1.0
    # p_o = 0, p_e = 0.5 by hand
    assert staging.cohens_kappa(["W", "W", "N2", "N2"], ["N2", "N2", "W", "W"]) == -1.0
    assert staging.cohens_kappa(["N2"] * 4, ["N2"] * 4) == 1.0


def test_kappa_matches_hand_formula_on_mixed_case():
    a = ["W", "W", "N2", "N2", "REM", "REM"]
    b = ["W", "N2", "N2", "N2", "REM", "W"]
    po = 4 / 6
    pe = (2 * 2 + 2 * 3 + 2 * 1) / 36
    assert staging.cohens_kappa(a, b) == pytest.approx((po - pe) / (1 - pe), abs=1e-15)


def test_kappa_random_stagings_near_zero():
    rng = np.random.default_rng(0)
    a = rng.choice(STAGES, size=10_000)
    b = rng.choice(STAGES, size=10_000)
    assert abs(staging.cohens_kappa(a, b)) < 0.05


def test_kappa_skips_unscored_and_undefined():
    assert staging.cohens_kappa(["W", "UNSCORED", "N2"], ["W", "REM", "N2"]) == 1.0
    with pytest.raises(UndefinedError):
        staging.cohens_kappa(["UNSCORED"], ["W"])
    with pytest.raises(ArgumentError):
        staging.cohens_kappa(["W"], ["W", "W"])


@settings(max_examples=60, deadline=None)
@given(stage_lists, st.data())
def test_kappa_properties(a, data):
    b = data.draw(st.lists(st.sampled_from(STAGES), min_size=len(a), max_size=len(a)))
    k = staging.cohens_kappa(a, b)
    assert -1.0 - 1e-12 <= k <= 1.0 + 1e-12
    assert k == pytest.approx(staging.cohens_kappa(b, a), abs=1e-12)
    if len(set(a)) > 1:
        assert staging.cohens_kappa(a, a) == 1.0


@settings(max_examples=40, deadline=None)
@given(stage_lists, st.data())
def test_confusion_total_and_order_invariance(a, data):
    b = data.draw(st.lists(st.sampled_from(list(STAGES) + ["UNSCORED"]), min_size=len(a), max_size=len(a)))
    cm = staging.confusion_matrix(a, b)
    assert cm.sum() == sum(x != "UNSCORED" for x in b)
    perm = data.draw(st.permutations(range(len(a))))
    cm2 = staging.confusion_matrix([a[i] for i in perm], [b[i] for i in perm])
    assert np.array_equal(cm, cm2)
    m1 = staging.macro(staging.per_stage_metrics(cm))
    m2 = staging.macro(staging.per_stage_metrics(cm2))
    assert all((math.isnan(m1[k]) and math.isnan(m2[k])) or m1[k] == m2[k] for k in m1)


def test_binary_metrics_hand_case():
    m = staging.binary_metrics(tp=8, fn=2, fp=1, tn=9)
    assert m["sensitivity"] == 0.8
    assert m["specificity"] == 0.9
    assert m["precision"] == pytest.approx(8 / 9, abs=1e-15)
    assert m["accuracy"] == 17 / 20
    assert m["f1"] == pytest.approx(16 / 19, abs=1e-15)


def test_two_by_two_confusion_hand_case():
    truth = ["REM"] * 10 + ["W"] * 10
    pred = ["REM"] * 8 + ["W"] * 2 + ["REM"] * 1 + ["W"] * 9
    cm = staging.confusion_matrix(pred, truth, labels=("REM", "W"))
    assert cm.tolist() == [[8, 2], [1, 9]]
    rem = staging.per_stage_metrics(cm, ("REM", "W"))["REM"]
    assert (rem["sensitivity"], rem["specificity"]) == (0.8, 0.9)


def test_perfect_and_absent_stage():
    h = Hypnogram(("W", "N1", "N2", "N3", "REM") * 3)
    rep = staging.stage_metrics(h, h)
    for s in STAGES:
        assert all(rep.per_stage[s][k] == 1.0 for k in staging.METRIC_NAMES)
    rep = staging.stage_metrics(Hypnogram(("W",) * 6), Hypnogram(("N2",) * 6))
    assert rep.per_stage["N2"]["sensitivity"] == 0.0
    assert rep.per_stage["W"]["specificity"] == 0.0
    assert math.isnan(rep.per_stage["REM"]["sensitivity"])
    assert rep.confusion.sum(axis=1).tolist() == [0, 0, 6, 0, 0]


def test_cohort_report_is_subject_mean():
    truth = {"a": Hypnogram(("W", "N2") * 5), "b": Hypnogram(("W", "N2") * 5)}
    pred = {"a": truth["a"], "b": Hypnogram(("N2", "W") * 5)}
    rep = staging.stage_metrics(pred, truth, "X")
    assert rep.kappa == pytest.approx(0.0)  # mean of 1 and -1
    assert rep.kappa_sd == pytest.approx(math.sqrt(2))
    assert rep.pooled_kappa == pytest.approx(0.0)
    assert rep.n_subjects == 2 and "X,ALL,kappa" in rep.to_csv()
    assert "cohort X" in rep.to_text()


def _toy_dataset(n_subjects=4, n_epochs=60, seed=0):
    rng = np.random.default_rng(seed)
    fms, hyps = {}, {}
    for i in range(n_subjects):
        stages = [str(s) for s in rng.choice(STAGES, size=n_epochs)]
        rows = rng.normal(scale=0.3, size=(n_epochs, SCHEMA.M))
        rows[:, :20] += np.array([STAGES.index(s) for s in stages])[:, None] * 3.0
        sid = f"s{i}"
        fms[sid] = FeatureMatrix(SCHEMA, rows, sid)
        stages[0] = "UNSCORED"
        hyps[sid] = Hypnogram(tuple(stages))
    return fms, hyps


def test_stage_recording_shapes():
    fms, hyps = _toy_dataset(2)
    model = staging.train_stager(fms, hyps, n_trees=10, seed=1)
    h = staging.stage_recording(model, fms["s0"])
    assert len(h) == len(fms["s0"])
    assert staging.stage_recording(model, FeatureMatrix(SCHEMA, np.zeros((0, SCHEMA.M)))).stages == ()


def test_run_cv_trains_on_other_subjects_only(monkeypatch):
    fms, hyps = _toy_dataset(2)
    seen = []
    real = staging.train_stager

    def spy(sub, *a, **kw):
        seen.append(sorted(sub))
        return real(sub, *a, **kw)

    monkeypatch.setattr(staging, "train_stager", spy)
    plan = make_folds(["s0", "s1"], ["HC", "RBD"], k=2, seed=0)
    res = staging.run_cv(fms, hyps, plan, n_trees=10, seed=0)
    assert sorted(seen) == [["s0"], ["s1"]]
    assert set(res.predicted) == {"s0", "s1"}
    assert set(res.reports) == {"ALL", "HC", "RBD"}


def test_run_cv_is_deterministic_and_accurate():
    fms, hyps = _toy_dataset(4, seed=3)
    plan = make_folds(sorted(fms), ["HC", "HC", "RBD", "RBD"], k=2, seed=1)
    a = staging.run_cv(fms, hyps, plan, n_trees=20, seed=5)
    b = staging.run_cv(fms, hyps, plan, n_trees=20, seed=5)
    assert a.reports["ALL"].to_csv() == b.reports["ALL"].to_csv()
    assert a.predicted == b.predicted
    assert a.reports["ALL"].kappa > 0.9


def test_leakage_guard_is_an_assertion():
    fms, hyps = _toy_dataset(2)
    with pytest.raises(AssertionError):
        staging._cv_fold((0, ["s0", "s1"], ["s1"], fms, hyps, 5, None, 0))
    bad = FoldPlan(2, {"s0": 0}, {"s0": "HC"})
    with pytest.raises(ArgumentError):
        staging.run_cv(fms, hyps, bad, n_trees=5)
