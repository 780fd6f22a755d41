import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psgrbd import psg_io
from psgrbd.errors import ArgumentError, DegenerateRecordingError, MontageError, ParseError
from psgrbd.psg_io import (Channel, Hypnogram, MontagePrefs, Recording, map_rk_to_aasm,
                           parse_edf, parse_hypnogram, format_hypnogram, resample, select_montage,
                           write_edf)


def test_minimal_edf_shape(make_edf):
    dig = np.arange(1000) % 200 - 100
    rec = parse_edf(make_edf({"EEG Fpz": (dig, 100)}))
    assert len(rec.channels) == 1
    ch = rec.channels[0]
    assert ch.rate == 100.0
    assert ch.samples.shape == (1000,)
    assert rec.duration == 10.0


def test_digital_zero_maps_by_linear_scaling(make_edf):
    data = make_edf({"X": (np.zeros(100, dtype=int), 100)}, dmin=-2048, dmax=2047,
                    pmin=-200.0, pmax=200.0)
    rec = parse_edf(data)
    # -200 + (0 - -2048) * 400 / 4095, worked by hand
    expected = -200.0 + 2048.0 * 400.0 / 4095.0
    assert rec.channels[0].samples[0] == pytest.approx(expected, abs=1e-12)
    assert rec.channels[0].samples[0] == pytest.approx(0.0489, abs=1e-4)


def test_millivolt_dimension_is_converted_to_microvolts(make_edf):
    dig = np.full(100, 1000)
    uv = parse_edf(make_edf({"A": (dig, 100)}, pmin=-1.0, pmax=1.0, dim="mV")).channels[0].samples
    expected = (-1.0 + (1000 + 32768) * 2.0 / 65535.0) * 1000.0
    assert uv[0] == pytest.approx(expected, rel=1e-12)


def test_truncated_file_raises_parse_error(make_edf):
    data = make_edf({"X": (np.zeros(500, dtype=int), 100)})
    with pytest.raises(ParseError):
        parse_edf(data[:-50])
    with pytest.raises(ParseError):
        parse_edf(data[:100])


def test_bad_version_and_numbers(make_edf):
    data = bytearray(make_edf({"X": (np.zeros(100, dtype=int), 100)}))
    bad = bytes(data)
    bad = b"1" + bad[1:]
    with pytest.raises(ParseError) as exc:
        parse_edf(bad)
    assert exc.value.offset == 0
    data[256 + 16 + 80 + 8:256 + 16 + 80 + 16] = b"abc     "
    with pytest.raises(ParseError):
        parse_edf(bytes(data))


def test_write_parse_round_trip_is_bit_identical(make_edf, rng):
    dig = rng.integers(-32768, 32768, size=3000)
    dig2 = rng.integers(-32768, 32768, size=1500)
    rec = parse_edf(make_edf({"C4-A1": (dig, 200), "ROC": (dig2, 100)}))
    again = parse_edf(write_edf(rec))
    for a, b in zip(rec.channels, again.channels):
        assert a.label == b.label and a.rate == b.rate
        assert np.array_equal(a.samples, b.samples)


def _rec(labels, rate=100.0, seconds=60):
    rng = np.random.default_rng(0)
    return Recording([Channel(lab, rng.normal(size=int(rate * seconds)), rate) for lab in labels],
                     duration=float(seconds))


def test_montage_preference_order():
    tri = select_montage(_rec(["C3-A2", "C4-A1", "ROC", "LOC", "Chin EMG"]))
    assert tri.source_labels[0] == "C4-A1"
    tri = select_montage(_rec(["C3-A2", "ROC", "LOC", "Chin EMG"]))
    assert tri.source_labels[0] == "C3-A2"
    assert tri.rate == 200.0 and len(tri.eeg) == len(tri.eog) == len(tri.emg) == 12000


def test_montage_without_eeg_names_the_missing_channel():
    with pytest.raises(MontageError, match="no EEG"):
        select_montage(_rec(["ROC", "LOC", "Chin EMG"]))


def test_eog_is_roc_minus_loc_and_referential_eeg_is_derived():
    rec = _rec(["C4", "A1", "ROC", "LOC", "Chin EMG"], rate=200.0)
    tri = select_montage(rec)
    c = {ch.label: ch.samples for ch in rec.channels}
    assert np.allclose(tri.eeg, c["C4"] - c["A1"])
    assert np.allclose(tri.eog, c["ROC"] - c["LOC"])
    assert np.array_equal(tri.emg, c["Chin EMG"])


@settings(max_examples=25, deadline=None)
@given(st.permutations(["C3-A2", "C4-A1", "ROC", "LOC", "Chin EMG", "EKG"]))
def test_montage_choice_ignores_channel_order(order):
    assert select_montage(_rec(order, seconds=10)).source_labels == ("C4-A1", "ROC-LOC", "Chin EMG")


def test_custom_preferences():
    prefs = MontagePrefs(eeg=("C3-A2", "C4-A1"))
    assert select_montage(_rec(["C3-A2", "C4-A1", "ROC", "LOC", "Chin EMG"]), prefs).source_labels[0] == "C3-A2"


def test_resample_length_and_identity():
    x = np.random.default_rng(1).normal(size=1000)
    assert resample(x, 100.0, 200.0).shape == (2000,)
    same = resample(x, 200.0, 200.0)
    assert np.array_equal(same, x) and same is not x
    with pytest.raises(ArgumentError):
        resample(x, 0.0)
    with pytest.raises(ArgumentError):
        resample(x, -5.0)


def test_resample_preserves_sine_amplitude():
    t = np.arange(256 * 20) / 256.0
    y = resample(np.sin(2 * np.pi * 10 * t), 256.0, 200.0)
    ty = np.arange(len(y)) / 200.0
    core = slice(400, len(y) - 400)
    # least-squares sine fit at 10 Hz
    A = np.column_stack([np.sin(2 * np.pi * 10 * ty[core]), np.cos(2 * np.pi * 10 * ty[core])])
    coef, *_ = np.linalg.lstsq(A, y[core], rcond=None)
    assert np.hypot(*coef) == pytest.approx(1.0, rel=0.01)


def test_resample_up_down_round_trip():
    rng = np.random.default_rng(3)
    t = np.arange(4000) / 200.0
    x = sum(rng.normal() * np.sin(2 * np.pi * f * t + rng.uniform(0, 6)) for f in (1.0, 3.5, 7.0, 20.0))
    back = resample(resample(x, 200.0, 400.0), 400.0, 200.0)
    core = slice(200, -200)
    assert np.linalg.norm(back[core] - x[core]) / np.linalg.norm(x[core]) < 1e-3


def test_rk_mapping():
    out = map_rk_to_aasm(["S0", "S1", "S2", "S3", "S4", "REM"])
    assert out.stages == ("W", "N1", "N2", "N3", "N3", "REM")
    assert map_rk_to_aasm(["S2"] * 5).stages == ("N2",) * 5
    mt = map_rk_to_aasm(["MT", "S2", "bogus"])
    assert mt.stages == ("UNSCORED", "N2", "UNSCORED")


@given(st.lists(st.sampled_from(list(psg_io.STAGES) + ["UNSCORED"]), max_size=50))
def test_rk_mapping_idempotent_on_aasm(labels):
    once = map_rk_to_aasm(labels)
    assert once.stages == tuple(labels)
    assert map_rk_to_aasm(once).stages == once.stages


def test_hypnogram_sidecar_round_trip_and_gaps():
    h = Hypnogram(("W", "N1", "REM", "UNSCORED"))
    text = format_hypnogram(h, source="automatic")
    assert text.startswith("# epoch_len=30\n# source=automatic\n")
    assert parse_hypnogram(text) == h
    gap = parse_hypnogram("# epoch_len=30\n0,S0\n2,S3\n")
    assert gap.stages == ("W", "UNSCORED", "N3")
    with pytest.raises(ParseError):
        parse_hypnogram("# epoch_len=20\n0,W\n")
    with pytest.raises(ParseError):
        parse_hypnogram("0,W\n0,N2\n")


def test_short_recording_is_degenerate():
    with pytest.raises(DegenerateRecordingError):
        psg_io.require_min_duration(_rec(["A"], seconds=120))
    psg_io.require_min_duration(_rec(["A"], seconds=300))
