import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psgrbd import emg as emgmod
from psgrbd import rbd
from psgrbd.errors import ArgumentError, MissingMetricError
from psgrbd.psg_io import STAGES, Hypnogram

RATE = 200.0
EP = 6000


def brute_atonia(emg, stages, stage="REM", corrected=True, span_s=60):
    """Window-by-window reference written with plain loops."""
    n_win = (len(emg) // EP) * 30
    amps = [sum(abs(v) for v in emg[i * 200:(i + 1) * 200].tolist()) / 200 for i in range(n_win)]
    if corrected:
        h = span_s // 2
        amps = [a - min(amps[max(0, i - h):min(n_win, i + h + 1)]) for i, a in enumerate(amps)]
    sel = [a for i, a in enumerate(amps) if stages[i // 30] == stage]
    if not sel:
        return float("nan")
    low = sum(a <= 1.0 for a in sel)
    mid = sum(1.0 < a < 2.0 for a in sel)
    return low / (len(sel) - mid) if len(sel) > mid else float("nan")


def random_night(seed, n_epochs=None):
    rng = np.random.default_rng(seed)
    n_epochs = n_epochs or int(rng.integers(12, 40))
    stages = rng.choice(STAGES, size=n_epochs).tolist()
    floor = rng.uniform(0.05, 1.5)
    x = rng.normal(scale=floor, size=n_epochs * EP)
    for _ in range(int(rng.integers(0, 12))):
        s = int(rng.integers(0, len(x) - 800))
        x[s:s + int(rng.integers(100, 800))] *= rng.uniform(2, 20)
    return x, stages


def test_atonia_index_matches_brute_force_on_100_nights():
    for seed in range(100):
        x, stages = random_night(seed)
        hyp = Hypnogram(stages)
        for corrected in (True, False):
            got = rbd.atonia_index(x, RATE, hyp, "REM", corrected)
            ref = brute_atonia(x, stages, "REM", corrected)
            if math.isnan(ref):
                assert math.isnan(got)
            else:
                assert abs(got - ref) < 1e-9, seed


def test_atonia_index_examples():
    hyp = Hypnogram(["REM"] * 4)
    assert rbd.atonia_index(np.zeros(4 * EP), RATE, hyp) == 1.0
    const = np.full(4 * EP, 10.0)
    assert rbd.atonia_index(const, RATE, hyp, corrected=True) == 1.0
    assert rbd.atonia_index(const, RATE, hyp, corrected=False) == 0.0
    assert math.isnan(rbd.atonia_index(const, RATE, Hypnogram(["N2"] * 4)))


def test_atonia_index_with_thirty_percent_bursts():
    rng = np.random.default_rng(1)
    n_ep = 40
    amp = np.full(n_ep * 30, 0.2)
    burst = rng.random(amp.shape[0]) < 0.3
    amp[burst] = 5.0
    x = np.repeat(amp, 200) * np.where(np.arange(n_ep * EP) % 2, 1.0, -1.0)
    hyp = Hypnogram(["REM"] * n_ep)
    ai = rbd.atonia_index(x, RATE, hyp)
    assert ai == pytest.approx(1 - burst.mean(), abs=1e-12)
    assert ai == pytest.approx(0.7, abs=0.02)
    assert ai == pytest.approx(brute_atonia(x, hyp.stages), abs=1e-12)


def test_atonia_monotone_when_amplitude_grows():
    rng = np.random.default_rng(2)
    for _ in range(100):
        x, stages = random_night(int(rng.integers(1 << 30)), n_epochs=12)
        hyp = Hypnogram(stages)
        if "REM" not in stages:
            continue
        y = x.copy()
        rem = np.repeat(np.array(stages) == "REM", EP)
        w = rng.random(len(x) // 200) < 0.3
        boost = np.repeat(w, 200) & rem
        y[boost] *= rng.uniform(1.0, 5.0)
        a = rbd.atonia_index(x, RATE, hyp, corrected=False)
        b = rbd.atonia_index(y, RATE, hyp, corrected=False)
        if not (math.isnan(a) or math.isnan(b)):
            assert b <= a + 1e-12


def test_atonia_invariant_to_consistent_epoch_permutation():
    rng = np.random.default_rng(3)
    x, stages = random_night(7, n_epochs=20)
    perm = rng.permutation(20)
    y = x.reshape(20, EP)[perm].ravel()
    a = rbd.atonia_index(x, RATE, Hypnogram(stages), corrected=False)
    b = rbd.atonia_index(y, RATE, Hypnogram([stages[i] for i in perm]), corrected=False)
    assert a == b


def _stream_night(rem_scale, n_rem=40, n_nrem=40, seed=0):
    rng = np.random.default_rng(seed)
    nrem = rng.normal(size=n_nrem * EP)
    rem = rng.normal(size=n_rem * EP) * rem_scale
    return np.concatenate([nrem, rem]), Hypnogram(["N2"] * n_nrem + ["REM"] * n_rem)


def test_stream_examples():
    x, hyp = _stream_night(0.0)
    assert rbd.stream_metric(x, RATE, hyp) == 1.0
    x, hyp = _stream_night(1.0, n_rem=200, n_nrem=200)
    assert rbd.stream_metric(x, RATE, hyp) == pytest.approx(0.95, abs=0.02)
    x, hyp = _stream_night(math.sqrt(10.0))
    assert rbd.stream_metric(x, RATE, hyp) < 0.01
    short = Hypnogram(["N2"] * 5 + ["REM"] * 5)
    assert math.isnan(rbd.stream_metric(np.ones(10 * EP), RATE, short))


@pytest.mark.parametrize("c", [0.5, 2.0, 10.0])
def test_stream_scale_invariance(c):
    for seed in range(10):
        x, stages = random_night(100 + seed, n_epochs=40)
        hyp = Hypnogram(stages)
        a = rbd.stream_metric(x, RATE, hyp)
        b = rbd.stream_metric(c * x, RATE, hyp)
        if math.isnan(a):
            assert math.isnan(b)
        else:
            assert abs(a - b) < 1e-9


def _burst_signal(seconds, bursts, base=1.0, gain=10.0):
    """Alternating-sign signal whose rectified envelope is ``base`` except inside bursts."""
    n = int(seconds * RATE)
    amp = np.full(n, base)
    for start, dur in bursts:
        amp[int(start * RATE):int((start + dur) * RATE)] = base * gain
    return amp * np.where(np.arange(n) % 2, 1.0, -1.0)


def test_motor_activity_flat_and_single_burst():
    hyp = Hypnogram(["REM"] * 2)
    assert rbd.motor_activity(np.ones(2 * EP), RATE, hyp) == 0.0
    x = _burst_signal(60, [(20.0, 3.0)])
    assert rbd.motor_activity(x, RATE, hyp) == pytest.approx(0.05, abs=0.01)
    assert math.isnan(rbd.motor_activity(x, RATE, Hypnogram(["N2"] * 2)))


def test_motor_merge_rule_on_constructed_bursts():
    x = _burst_signal(60, [(10.0, 0.3), (10.7, 0.3)])
    mask, env_rate = emgmod.motor_mask(x, RATE)
    starts, stops = emgmod._runs(mask)
    assert len(starts) == 1
    assert (stops[0] - starts[0]) / env_rate == pytest.approx(1.0, abs=1e-9)
    # a gap of 0.6 s is not merged
    x = _burst_signal(60, [(10.0, 0.3), (10.9, 0.3)])
    starts, _ = emgmod._runs(emgmod.motor_mask(x, RATE)[0])
    assert len(starts) == 2
    # a 0.2 s burst is too short to count
    x = _burst_signal(60, [(10.0, 0.2)])
    assert not emgmod.motor_mask(x, RATE)[0].any()


def test_detect_events_exact_grid():
    env = np.ones(100)
    env[10:16] = 5.0   # 0.3 s at 20 Hz
    env[24:30] = 5.0   # 0.4 s gap
    env[60:64] = 5.0   # 0.2 s, dropped
    out = emgmod.detect_events(env, np.ones(100), 20.0)
    assert np.nonzero(out)[0].tolist() == list(range(10, 30))


def _power_law(alpha, n, rng):
    f = np.fft.rfftfreq(n, 1 / RATE)
    amp = np.zeros_like(f)
    amp[1:] = f[1:] ** (-alpha / 2.0)
    x = np.fft.irfft(amp * np.exp(1j * rng.uniform(0, 2 * np.pi, f.shape)), n=n)
    return x / x.std()


def test_fractal_ratio_oracles():
    rng = np.random.default_rng(4)
    n3 = np.concatenate([_power_law(2.0, EP, rng) for _ in range(6)])
    rem = np.concatenate([_power_law(0.0, EP, rng) for _ in range(6)])
    hyp = Hypnogram(["N3"] * 6 + ["REM"] * 6)
    x = np.concatenate([n3, rem])
    fe_n3 = rbd.fractal_exponent_mean(x, RATE, hyp, "N3")
    fe_rem = rbd.fractal_exponent_mean(x, RATE, hyp, "REM")
    assert rbd.stage_ratio(fe_n3, fe_rem) > 10
    same = np.concatenate([_power_law(1.0, EP, rng) for _ in range(12)])
    hyp2 = Hypnogram(["N2"] * 6 + ["REM"] * 6)
    r = rbd.stage_ratio(rbd.fractal_exponent_mean(same, RATE, hyp2, "N2"),
                        rbd.fractal_exponent_mean(same, RATE, hyp2, "REM"))
    assert r == pytest.approx(1.0, abs=0.1)
    white = rng.normal(size=12 * EP)
    r = rbd.stage_ratio(rbd.fractal_exponent_mean(white, RATE, hyp2, "N2"),
                        rbd.fractal_exponent_mean(white, RATE, hyp2, "REM"))
    assert math.isfinite(r)


def test_stage_ratio_epsilon_floor():
    assert rbd.stage_ratio(0.0, 0.0) == 1.0
    assert rbd.stage_ratio(0.99, 0.49) == pytest.approx(2.0)
    assert math.isnan(rbd.stage_ratio(float("nan"), 1.0))


def test_sleep_architecture_examples():
    assert rbd.sleep_architecture(Hypnogram(["N3"] * 5)) == (1.0, 1.0)
    n3, eff = rbd.sleep_architecture(Hypnogram(["W", "W", "N2", "N3", "REM", "N3"]))
    assert n3 == 0.5 and eff == pytest.approx(4 / 6)
    n3, eff = rbd.sleep_architecture(Hypnogram(["W"] * 3))
    assert math.isnan(n3) and eff == 0.0
    with pytest.raises(ArgumentError):
        rbd.sleep_architecture(Hypnogram(["UNSCORED"]))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_metrics_in_range_and_summary_path_agrees(seed):
    x, stages = random_night(seed, n_epochs=30)
    hyp = Hypnogram(stages)
    m = rbd.assemble("s", "HC", x, RATE, hyp, "manual")
    for name in ("atonia_index_rem", "stream", "motor_activity", "n3_ratio", "sleep_efficiency"):
        v = getattr(m, name)
        assert math.isnan(v) or 0.0 <= v <= 1.0
    p = rbd.MetricParams()
    assert m.atonia_index_rem == rbd.atonia_index(x, RATE, hyp) or (
        math.isnan(m.atonia_index_rem) and math.isnan(rbd.atonia_index(x, RATE, hyp)))
    direct_stream = rbd.stream_metric(x, RATE, hyp, p.stream_percentile)
    assert (math.isnan(m.stream) and math.isnan(direct_stream)) or m.stream == direct_stream
    direct_motor = rbd.motor_activity(x, RATE, hyp, p)
    assert (math.isnan(m.motor_activity) and math.isnan(direct_motor)) or m.motor_activity == direct_motor


def test_missing_rem_marks_rem_metrics_missing():
    x = np.random.default_rng(5).normal(size=20 * EP)
    m = rbd.assemble("s", "HC", x, RATE, Hypnogram(["N2"] * 20), "automatic")
    assert set(m.missing()) >= {"atonia_index_rem", "stream", "motor_activity", "ai_ratio_n2",
                                "fe_ratio_n2"}
    assert not math.isnan(m.sleep_efficiency)
    with pytest.raises(ArgumentError):
        rbd.assemble("s", "HC", x, RATE, Hypnogram(["N2"] * 20), "guess")


def test_metrics_csv_round_trip():
    a = rbd.SubjectMetrics("s1", "HC", "manual", 0.9, 0.95, 0.01, 1.0, 1.1, 0.9, 1.2, 0.2, 0.85)
    b = rbd.SubjectMetrics("s2", "RBD", "automatic", float("nan"), 0.5, 0.3, 2.0, 2.1, 0.5, 0.4, 0.1, 0.7)
    back = rbd.metrics_from_csv(rbd.metrics_to_csv([a, b]))
    assert back[0] == a
    assert math.isnan(back[1].atonia_index_rem) and back[1].stream == 0.5


def _fake_metrics(n, cohort, rng, source="manual"):
    out = []
    for i in range(n):
        if cohort == "HC":
            ai, stream, ma = rng.uniform(0.9, 1.0), rng.uniform(0.9, 1.0), rng.uniform(0, 0.05)
        else:
            ai, stream, ma = rng.uniform(0.2, 0.7), rng.uniform(0.3, 0.8), rng.uniform(0.2, 0.6)
        out.append(rbd.SubjectMetrics(f"{cohort}{i}", cohort, source, ai, stream, ma,
                                      rng.uniform(0.9, 1.1), rng.uniform(0.9, 1.1),
                                      rng.uniform(0.8, 1.2), rng.uniform(0.8, 1.2),
                                      rng.uniform(0.1, 0.25), rng.uniform(0.8, 0.95)))
    return out


def test_detector_on_synthetic_metrics():
    rng = np.random.default_rng(6)
    data = _fake_metrics(15, "HC", rng) + _fake_metrics(15, "RBD", rng)
    model = rbd.train_detector(data, "additional", seed=1, n_trees=100)
    assert model.m_try == 3 and model.M == 9
    atonic = rbd.SubjectMetrics("x", "HC", "manual", 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.2, 0.9)
    label, p = rbd.detect(model, atonic)
    assert label == "HC" and 0.0 <= p <= 0.5
    bursty = rbd.SubjectMetrics("y", "RBD", "manual", 0.4, 0.5, 0.4, 1.0, 1.0, 1.0, 1.0, 0.2, 0.9)
    assert rbd.detect(model, bursty)[0] == "RBD"
    est = rbd.train_detector(data, "established", seed=1, n_trees=50)
    assert est.m_try == 2 and est.feature_names == ("atonia_index_rem", "stream", "motor_activity")


def test_detector_errors():
    rng = np.random.default_rng(7)
    only_hc = _fake_metrics(6, "HC", rng)
    with pytest.raises(ArgumentError):
        rbd.train_detector(only_hc)
    with pytest.raises(ArgumentError):
        rbd.train_detector(only_hc, variant="bogus")
    model = rbd.train_detector(only_hc + _fake_metrics(6, "RBD", rng), n_trees=10)
    m = only_hc[0]
    broken = rbd.SubjectMetrics(**{**m.__dict__, "stream": float("nan"), "n3_ratio": float("nan")})
    with pytest.raises(MissingMetricError) as exc:
        rbd.detect(model, broken)
    assert "stream" in str(exc.value) and "n3_ratio" in str(exc.value)


def test_detector_cv_and_single_metric():
    from psgrbd.forest import make_folds

    rng = np.random.default_rng(8)
    data = _fake_metrics(10, "HC", rng) + _fake_metrics(10, "RBD", rng)
    plan = make_folds([m.subject_id for m in data], [m.cohort for m in data], k=5, seed=0)
    res = rbd.detector_cv(data, plan, "additional", seed=0, n_trees=50)
    assert res.accuracy >= 0.9 and len(res.predictions) == 20
    again = rbd.detector_cv(data, plan, "additional", seed=0, n_trees=50)
    assert again.predictions == res.predictions
    single = rbd.single_metric_cv(data, plan, "motor_activity")
    assert single.accuracy == 1.0
    assert rbd._best_threshold(np.array([0.1, 0.2, 0.8, 0.9]), np.array([0, 0, 1, 1], bool)) == (0.5, True)
