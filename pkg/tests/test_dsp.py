import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psgrbd import dsp
from psgrbd.dsp import EpochGrid, FilterSpec
from psgrbd.errors import ArgumentError, EmptyGridError
from psgrbd.psg_io import MontageTriplet

RATE = 200.0


def _tone(f, seconds=30.0, amp=1.0, phase=0.0):
    t = np.arange(int(seconds * RATE)) / RATE
    return amp * np.sin(2 * np.pi * f * t + phase)


def test_bandpass_response_bounds():
    h = dsp.design_fir(FilterSpec("bandpass", 500, (0.3, 40.0), RATE))
    assert len(h) == 501
    assert np.allclose(h, h[::-1])  # linear phase
    db = dsp.frequency_response_db(h, [20.0, 60.0], RATE)
    assert db[0] >= -1.0
    assert db[1] <= -40.0


def test_notch_response_bounds():
    h = dsp.design_fir(FilterSpec("notch", 500, (50.0,), RATE))
    db = dsp.frequency_response_db(h, [50.0, 30.0], RATE)
    assert db[0] <= -30.0
    assert db[1] >= -1.0


@pytest.mark.parametrize("kw", [
    dict(kind="bandpass", order=0, edges=(0.3, 40.0)),
    dict(kind="bandpass", order=501, edges=(0.3, 40.0)),
    dict(kind="bandpass", order=500, edges=(0.3, 100.0)),
    dict(kind="bandpass", order=500, edges=(40.0, 0.3)),
    dict(kind="lowpass", order=500, edges=(40.0,)),
])
def test_filter_spec_preconditions(kw):
    with pytest.raises(ArgumentError):
        FilterSpec(rate=RATE, **kw)


def _triplet(eeg, emg):
    return MontageTriplet(eeg=eeg, eog=eeg.copy(), emg=emg, rate=RATE, source_labels=("a", "b", "c"))


def _rms(x):
    return float(np.sqrt(np.mean(x ** 2)))


def test_preprocessing_attenuates_out_of_band_tones():
    sixty, fifty = _tone(60.0), _tone(50.0)
    out = dsp.apply_preprocessing(_triplet(sixty, fifty))
    core = slice(1000, -1000)
    assert _rms(out.eeg[core]) < 0.01 * _rms(sixty[core])
    assert _rms(out.emg[core]) < 0.05 * _rms(fifty[core])
    zero = dsp.apply_preprocessing(_triplet(np.zeros(6000), np.zeros(6000)))
    assert not zero.eeg.any() and not zero.emg.any()


def test_preprocessing_is_linear():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, 4000))
    h = dsp.design_fir(FilterSpec("bandpass", 500, (0.3, 40.0), RATE))
    lhs = dsp.filtfilt_fir(h, 2.5 * a - 0.7 * b)
    rhs = 2.5 * dsp.filtfilt_fir(h, a) - 0.7 * dsp.filtfilt_fir(h, b)
    assert np.max(np.abs(lhs - rhs)) < 1e-9


def test_zero_phase_filtering_has_no_lag():
    x = _tone(10.0)
    h = dsp.design_fir(FilterSpec("bandpass", 500, (0.3, 40.0), RATE))
    y = dsp.filtfilt_fir(h, x)
    core = slice(1000, -1000)
    xc = np.correlate(y[core], x[core], mode="full")
    lag = int(np.argmax(xc)) - (len(x[core]) - 1)
    assert abs(lag) <= 1


@pytest.mark.parametrize("seconds,n", [(90, 3), (95, 3)])
def test_segment_shapes(seconds, n):
    seg = dsp.segment(np.zeros(int(seconds * RATE)))
    assert seg.shape == (n, 3, 2000)


def test_segment_short_and_no_alias():
    with pytest.raises(EmptyGridError):
        dsp.segment(np.zeros(29 * 200))
    x = np.arange(18000.0)
    seg = dsp.segment(x)
    seg[0, 0, 0] = -1.0
    assert x[0] == 0.0
    assert np.array_equal(dsp.segment(x)[1, 2], x[6000 + 4000:6000 + 6000])
    with pytest.raises(ArgumentError):
        EpochGrid(mini_len=7.0)


def test_welch_parseval_on_white_noise():
    x = np.random.default_rng(4).normal(size=60000)
    f, d = dsp.psd(x, RATE)
    assert np.sum(d) * (f[1] - f[0]) == pytest.approx(1.0, abs=0.05)


def test_psd_sine_peak_and_zero():
    f, d = dsp.psd(_tone(10.0, amp=3.0), RATE)
    k = int(np.argmax(d))
    assert f[k] == pytest.approx(10.0)
    near = d[max(k - 2, 0):k + 3].sum()
    assert near / d.sum() >= 0.95
    f0, d0 = dsp.psd(np.zeros(1000), RATE)
    assert not d0.any()
    with pytest.raises(ArgumentError):
        dsp.psd(np.zeros(100), RATE)


def test_stft_stationary_alpha_and_chirp():
    f, _, mag = dsp.stft(_tone(10.0, seconds=10), RATE)
    alpha = dsp.band_magnitudes(f, mag)["alpha"]
    assert np.ptp(alpha) / alpha.mean() < 0.02
    t = np.arange(int(20 * RATE)) / RATE
    from scipy.signal import chirp
    f, _, mag = dsp.stft(chirp(t, 2.0, 20.0, 30.0), RATE)
    bands = dsp.band_magnitudes(f, mag, ("delta", "theta", "alpha", "beta"))
    trace = np.argmax(np.stack([bands[b] for b in ("delta", "theta", "alpha", "beta")]), axis=0)
    assert np.all(np.diff(trace) >= 0) and trace[0] == 0 and trace[-1] == 3
    _, _, z = dsp.stft(np.zeros(1000), RATE)
    assert not z.any()


@pytest.mark.parametrize("wavelet", ["haar", "db2"])
def test_dwt_perfect_reconstruction(wavelet):
    x = np.random.default_rng(5).normal(size=1024)
    rec = dsp.idwt(dsp.dwt(x, wavelet, 4), wavelet, len(x))
    assert np.max(np.abs(rec - x)) < 1e-9


def test_dwt_constant_impulse_and_errors():
    coeffs = dsp.dwt(np.full(64, 3.0), "haar", 4)
    assert all(np.allclose(d, 0.0) for d in coeffs[1:])
    imp = np.zeros(256)
    imp[37] = 1.0
    assert np.max(np.abs(dsp.idwt(dsp.dwt(imp), length=256) - imp)) < 1e-9
    with pytest.raises(ArgumentError):
        dsp.dwt(np.zeros(8), "haar", 4)
    with pytest.raises(ArgumentError):
        dsp.dwt(np.zeros(64), "sym5", 4)
    odd = np.random.default_rng(6).normal(size=2000 - 3)
    assert np.max(np.abs(dsp.idwt(dsp.dwt(odd, "db2"), "db2", len(odd)) - odd)) < 1e-9


def test_coherence_oracles():
    rng = np.random.default_rng(7)
    x = rng.normal(size=6000)
    f, c = dsp.coherence(x, x, RATE)
    assert np.all(c > 1 - 1e-9)
    f, c = dsp.coherence(x, rng.normal(size=6000), RATE)
    assert c.mean() < 0.2
    delayed = np.roll(x, 5)
    f, c = dsp.coherence(x, delayed, RATE)
    assert np.median(c) > 0.9
    f, c = dsp.coherence(x, -x, RATE)
    assert np.all(c > 1 - 1e-9)
    with pytest.raises(ArgumentError):
        dsp.coherence(x, x[:-1], RATE)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_psd_nonnegative_and_coherence_bounded(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, 1024)) * rng.uniform(0.1, 10)
    assert np.all(dsp.psd(x, RATE)[1] >= 0)
    c = dsp.coherence(x, x + rng.normal(size=1024), RATE)[1]
    assert np.all((c >= 0) & (c <= 1))


def test_spectral_edge_and_band_power():
    f, d = dsp.psd(_tone(10.0), RATE, window_s=4.0)
    assert dsp.spectral_edge(f, d) == pytest.approx(10.0, abs=f[1] - f[0])
    assert dsp.spectral_edge(f, np.zeros_like(d)) == 0.0
    assert dsp.band_power(f, d, 8, 13) == pytest.approx(np.sum(d) * (f[1] - f[0]), rel=0.01)


def test_centered_moving_min():
    x = np.array([5.0, 1.0, 4.0, 3.0, 9.0, 2.0])
    assert dsp.centered_moving_min(x, 1).tolist() == [1.0, 1.0, 1.0, 3.0, 2.0, 2.0]
