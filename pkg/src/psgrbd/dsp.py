"""Filtering, segmentation and spectral primitives.

Everything here is a pure function of its inputs.  Signals are numpy arrays
and every routine operates along the last axis, so batches of epochs or
mini-epochs can be processed in one call.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, signal

from .errors import ArgumentError, EmptyGridError

TARGET_RATE = 200.0

# Clinical EEG bands in Hz; gamma stops at the 40 Hz EEG low-pass.
BANDS = {
    "delta": (0.5, 4.0),
    "theta": (4.0, 8.0),
    "alpha": (8.0, 13.0),
    "lowalpha": (8.0, 10.0),
    "beta": (13.0, 30.0),
    "gamma": (30.0, 40.0),
}
# The five bands that partition the EEG spectrum (relative spectral power).
RSP_BANDS = ("delta", "theta", "alpha", "beta", "gamma")
CLINICAL_BANDS = ("delta", "theta", "alpha", "lowalpha", "beta", "gamma")

NOTCH_HALF_WIDTH = 2.0


@dataclass(frozen=True)
class FilterSpec:
    """Linear-phase FIR filter request.

    ``kind`` is one of ``bandpass``, ``highpass`` or ``notch``.  For a notch
    the single edge is the centre frequency; the stop band is
    ``centre +/- NOTCH_HALF_WIDTH``.
    """

    kind: str
    order: int
    edges: tuple
    rate: float

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple(float(e) for e in self.edges))
        if self.kind not in ("bandpass", "highpass", "notch"):
            raise ArgumentError(f"unknown filter kind {self.kind!r}")
        if int(self.order) != self.order or self.order < 2 or self.order % 2:
            raise ArgumentError(f"filter order must be even and >= 2, got {self.order}")
        if self.rate <= 0:
            raise ArgumentError("sampling rate must be positive")
        expected = {"bandpass": 2, "highpass": 1, "notch": 1}[self.kind]
        if len(self.edges) != expected:
            raise ArgumentError(f"{self.kind} filter takes {expected} edge(s)")
        nyq = self.rate / 2.0
        if any(e <= 0 for e in self.edges) or any(e >= nyq for e in self.edges):
            raise ArgumentError(f"filter edges {self.edges} must lie in (0, {nyq}) Hz")
        if any(b <= a for a, b in zip(self.edges, self.edges[1:])):
            raise ArgumentError("filter edges must be strictly increasing")
        if self.kind == "notch":
            c = self.edges[0]
            if c - NOTCH_HALF_WIDTH <= 0 or c + NOTCH_HALF_WIDTH >= nyq:
                raise ArgumentError(f"notch at {c} Hz does not fit below Nyquist")


def design_fir(spec):
    """Hamming-window FIR coefficients (``spec.order + 1`` taps)."""
    if not isinstance(spec, FilterSpec):
        raise ArgumentError("design_fir expects a FilterSpec")
    ntaps = spec.order + 1
    if spec.kind == "bandpass":
        return signal.firwin(ntaps, spec.edges, pass_zero=False, fs=spec.rate)
    if spec.kind == "highpass":
        return signal.firwin(ntaps, spec.edges[0], pass_zero=False, fs=spec.rate)
    c = spec.edges[0]
    return signal.firwin(ntaps, [c - NOTCH_HALF_WIDTH, c + NOTCH_HALF_WIDTH], pass_zero=True, fs=spec.rate)


def frequency_response_db(h, freqs, rate):
    """Magnitude response of FIR ``h`` in dB at the given frequencies."""
    _, H = signal.freqz(h, worN=np.asarray(freqs, dtype=float), fs=rate)
    return 20 * np.log10(np.maximum(np.abs(H), 1e-300))


def filtfilt_fir(h, x):
    """Zero-phase forward-backward application of a symmetric FIR.

    Forward then backward filtering with a linear-phase kernel equals one
    centred convolution with ``h * h``.  Edges are handled with an odd
    reflection (as ``scipy.signal.filtfilt`` does) and are kept, not trimmed.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n < 2:
        return x.copy()
    h2 = np.convolve(h, h)
    pad = min(len(h2), n - 1)
    head = 2 * x[..., :1] - x[..., pad:0:-1]
    tail = 2 * x[..., -1:] - x[..., -2:-pad - 2:-1]
    ext = np.concatenate([head, x, tail], axis=-1)
    y = signal.oaconvolve(ext, h2[(None,) * (x.ndim - 1)], mode="same", axes=-1)
    return y[..., pad:pad + n]


def apply_preprocessing(triplet, eeg_band=(0.3, 40.0), emg_notches=(50.0, 60.0),
                        emg_band=(10.0, 100.0), order=500):
    """Filter a montage triplet sampled at 200 Hz.

    EEG and EOG are band-passed; EMG is notch-filtered at each mains
    frequency and then band-passed.  An upper band edge at or above Nyquist
    turns the band-pass into a high-pass at the lower edge.
    """
    from .psg_io import MontageTriplet

    rate = triplet.rate
    if abs(rate - TARGET_RATE) > 1e-9:
        raise ArgumentError(f"preprocessing expects {TARGET_RATE} Hz, got {rate}")
    eeg_h = design_fir(_band_spec(eeg_band, order, rate))
    emg_h = design_fir(_band_spec(emg_band, order, rate))
    emg = triplet.emg
    for f0 in emg_notches:
        emg = filtfilt_fir(design_fir(FilterSpec("notch", order, (f0,), rate)), emg)
    return MontageTriplet(
        eeg=filtfilt_fir(eeg_h, triplet.eeg),
        eog=filtfilt_fir(eeg_h, triplet.eog),
        emg=filtfilt_fir(emg_h, emg),
        rate=rate,
        source_labels=triplet.source_labels,
    )


def _band_spec(band, order, rate):
    lo, hi = band
    if hi >= rate / 2.0:
        return FilterSpec("highpass", order, (lo,), rate)
    return FilterSpec("bandpass", order, (lo, hi), rate)


# --- segmentation ------------------------------------------------------------


@dataclass(frozen=True)
class EpochGrid:
    rate: float = TARGET_RATE
    epoch_len: float = 30.0
    mini_len: float = 10.0

    def __post_init__(self):
        ratio = self.epoch_len / self.mini_len
        if abs(ratio - round(ratio)) > 1e-9:
            raise ArgumentError("mini-epoch length must divide the epoch length")

    @property
    def epoch_samples(self):
        return int(round(self.epoch_len * self.rate))

    @property
    def mini_samples(self):
        return int(round(self.mini_len * self.rate))

    @property
    def n_minis(self):
        return int(round(self.epoch_len / self.mini_len))

    def n_epochs(self, n_samples):
        return n_samples // self.epoch_samples


def segment(x, grid=None):
    """Cut a signal into ``(n_epochs, n_minis, mini_samples)``.

    The trailing partial epoch is dropped.  The result is a fresh array that
    never aliases ``x``.
    """
    grid = grid or EpochGrid()
    x = np.asarray(x, dtype=np.float64)
    n_epochs = grid.n_epochs(x.shape[-1])
    if n_epochs < 1:
        raise EmptyGridError(f"signal of {x.shape[-1]} samples is shorter than one epoch")
    used = x[..., : n_epochs * grid.epoch_samples]
    return used.reshape(x.shape[:-1] + (n_epochs, grid.n_minis, grid.mini_samples)).copy()


# --- spectra -------------------------------------------------------------------


def psd(x, rate, window_s=2.0, overlap=0.5):
    """Welch PSD with Hann windows.

    Returns ``(freqs, density)`` with density in units**2/Hz, so integrating
    over frequency gives the signal variance.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 256:
        raise ArgumentError(f"psd needs at least 256 samples, got {x.shape[-1]}")
    nperseg = min(int(round(window_s * rate)), x.shape[-1])
    return signal.welch(x, fs=rate, window="hann", nperseg=nperseg,
                        noverlap=int(nperseg * overlap), axis=-1)


def band_power(freqs, dens, lo, hi, closed=False):
    """Integrated power over ``[lo, hi)`` (``[lo, hi]`` if ``closed``)."""
    df = freqs[1] - freqs[0]
    sel = (freqs >= lo) & ((freqs <= hi) if closed else (freqs < hi))
    return dens[..., sel].sum(axis=-1) * df


def spectral_edge(freqs, dens, fraction=0.95):
    """Lowest frequency below which ``fraction`` of the power lies (0 if no power)."""
    cum = np.cumsum(dens, axis=-1)
    total = cum[..., -1:]
    with np.errstate(invalid="ignore", divide="ignore"):
        reached = cum >= fraction * total
    k = np.argmax(reached, axis=-1)
    return np.where(total[..., 0] > 0, freqs[k], 0.0)


def stft(x, rate, window_s=1.0, hop_s=0.5):
    """Short-time Fourier magnitudes ``(freqs, times, |Z|)`` with a Hann window."""
    x = np.asarray(x, dtype=np.float64)
    nperseg = int(round(window_s * rate))
    if x.shape[-1] < nperseg:
        raise ArgumentError("signal shorter than one STFT window")
    noverlap = nperseg - int(round(hop_s * rate))
    f, t, Z = signal.stft(x, fs=rate, window="hann", nperseg=nperseg, noverlap=noverlap,
                          boundary=None, padded=False, axis=-1)
    return f, t, np.abs(Z)


def band_magnitudes(freqs, mag, bands=CLINICAL_BANDS):
    """Mean STFT magnitude per band; returns ``{band: (..., n_frames)}``."""
    out = {}
    for name in bands:
        lo, hi = BANDS[name]
        sel = (freqs >= lo) & (freqs < hi)
        out[name] = mag[..., sel, :].mean(axis=-2)
    return out


def coherence(x, y, rate, nperseg=None):
    """Magnitude-squared coherence (Welch, Hann, 50 % overlap), clipped to [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ArgumentError(f"coherence inputs differ in shape: {x.shape} vs {y.shape}")
    n = x.shape[-1]
    if n < 512:
        raise ArgumentError(f"coherence needs at least 512 samples, got {n}")
    if nperseg is None:
        nperseg = min(int(round(rate)), n // 4)
    f, c = signal.coherence(x, y, fs=rate, window="hann", nperseg=nperseg, axis=-1)
    return f, np.clip(np.nan_to_num(c, nan=0.0), 0.0, 1.0)


# --- wavelets ------------------------------------------------------------------

_S3 = np.sqrt(3.0)
_WAVELETS = {
    "haar": np.array([1.0, 1.0]) / np.sqrt(2.0),
    "db2": np.array([1 + _S3, 3 + _S3, 3 - _S3, 1 - _S3]) / (4 * np.sqrt(2.0)),
}


def _filters(wavelet):
    try:
        lo = _WAVELETS[wavelet.lower()]
    except (KeyError, AttributeError):
        raise ArgumentError(f"unsupported wavelet {wavelet!r}; use 'haar' or 'db2'") from None
    hi = lo[::-1] * (-1.0) ** np.arange(len(lo))
    return lo, hi


def _analysis(x, lo, hi):
    n = x.shape[-1]
    k2 = 2 * np.arange(n // 2)
    a = np.zeros(x.shape[:-1] + (n // 2,))
    d = np.zeros_like(a)
    for i in range(len(lo)):
        xi = x[..., (k2 + i) % n]
        a += lo[i] * xi
        d += hi[i] * xi
    return a, d


def _synthesis(a, d, lo, hi):
    m = a.shape[-1]
    n = 2 * m
    x = np.zeros(a.shape[:-1] + (n,))
    k2 = 2 * np.arange(m)
    for i in range(len(lo)):
        # (2k + i) mod n is distinct for every k, so fancy-index += is safe
        x[..., (k2 + i) % n] += lo[i] * a + hi[i] * d
    return x


def dwt(x, wavelet="haar", levels=4):
    """Periodised orthogonal DWT.

    Returns ``[cA_levels, cD_levels, ..., cD_1]``.  Lengths that are not a
    multiple of ``2**levels`` are padded by edge repetition; ``idwt`` needs
    the original length to crop.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n < 2 ** levels:
        raise ArgumentError(f"dwt with {levels} levels needs at least {2 ** levels} samples, got {n}")
    lo, hi = _filters(wavelet)
    block = 2 ** levels
    if n % block:
        x = np.concatenate([x, np.repeat(x[..., -1:], block - n % block, axis=-1)], axis=-1)
    details = []
    a = x
    for _ in range(levels):
        a, d = _analysis(a, lo, hi)
        details.append(d)
    return [a] + details[::-1]


def idwt(coeffs, wavelet="haar", length=None):
    """Inverse of :func:`dwt`; ``length`` crops padding added by ``dwt``."""
    lo, hi = _filters(wavelet)
    a = np.asarray(coeffs[0], dtype=np.float64)
    for d in coeffs[1:]:
        a = _synthesis(a, np.asarray(d, dtype=np.float64), lo, hi)
    return a if length is None else a[..., :length]


def detail_reconstruction(x, wavelet="haar", levels=4):
    """Signal rebuilt from the deepest detail band only."""
    x = np.asarray(x, dtype=np.float64)
    coeffs = dwt(x, wavelet, levels)
    kept = [np.zeros_like(coeffs[0]), coeffs[1]] + [np.zeros_like(c) for c in coeffs[2:]]
    return idwt(kept, wavelet, length=x.shape[-1])


# --- windowed statistics -------------------------------------------------------


def window_view(x, rate, win_s):
    """Non-overlapping windows ``(..., n_windows, win)``; the tail is dropped."""
    x = np.asarray(x, dtype=np.float64)
    w = int(round(win_s * rate))
    n = x.shape[-1] // w
    return x[..., : n * w].reshape(x.shape[:-1] + (n, w))


def centered_moving_min(x, half_width):
    """Minimum over ``[i - half_width, i + half_width]`` (truncated at the ends)."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return x.copy()
    return ndimage.minimum_filter1d(x, size=2 * half_width + 1, mode="nearest", axis=-1)
