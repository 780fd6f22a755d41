"""Synthetic polysomnograms with known stages, for desk-scale testing.

The generator aims at separability, not physiological fidelity.  EEG is a
stage-weighted sum of band-limited noises, EOG carries stage-specific eye
movements, and chin EMG is coloured noise (power ~ f^-alpha, alpha drawn
per subject and stage) multiplied by a tone envelope.  RBD-like subjects
get phasic bursts and tonic stretches in REM; healthy controls keep an
atonic REM floor with rare twitches.
"""

from dataclasses import dataclass, replace
from datetime import datetime

import numpy as np
from scipy import ndimage, signal

from .errors import ArgumentError
from .psg_io import EPOCH_LEN, STAGES, UNSCORED, Channel, Hypnogram, Recording

COHORTS = ("HC", "RBD")
_STAGE_INDEX = {s: i for i, s in enumerate(STAGES)}
_EEG_BANDS = {"delta": (0.5, 4.0), "theta": (4.0, 8.0), "alpha": (8.0, 13.0),
              "beta": (13.0, 30.0), "gamma": (30.0, 40.0)}
# RMS µV per band for W, N1, N2, N3, REM
_EEG_RMS = {
    "delta": (5.0, 7.0, 14.0, 30.0, 7.0),
    "theta": (6.0, 10.0, 9.0, 9.0, 9.0),
    "alpha": (10.0, 5.0, 4.0, 3.0, 5.0),
    "beta": (7.0, 5.0, 4.0, 3.0, 5.0),
    "gamma": (3.0, 2.0, 1.2, 1.0, 2.0),
}
# log-sd of the per-epoch band amplitude jitter
_EEG_JITTER = 0.3
# EMG tone (RMS µV) in W, N1, N2, N3; REM uses the profile floor
_EMG_TONE = (8.0, 3.0, 2.0, 1.6)
_MAINS_UV = 0.5


@dataclass(frozen=True)
class SyntheticProfile:
    """Generator parameters for one subject.

    Attributes
    ----------
    cohort : {"HC", "RBD"}
    hours : float
        Recording length.
    rem_floor_uv : float
        RMS of the REM EMG floor.
    burst_fraction : float
        Expected share of REM time covered by phasic EMG bursts.
    burst_amp_uv : float
        Mean burst RMS amplitude.
    tonic_fraction : float
        Share of REM epochs with raised tonic EMG.
    n3_minutes : float
        N3 length in the first sleep cycle (later cycles shrink).
    wake_rate : float
        Probability per NREM block of a short awakening.
    alpha_rem, alpha_n2, alpha_n3, alpha_w : float
        EMG spectral exponents per stage (N1 shares ``alpha_n2``).
    nrem_tone_gain : float
        Multiplier of the NREM EMG tone.
    eeg_gain : float
        Global EEG amplitude multiplier.
    unscored_rate : float
        Probability that a wake epoch is labelled movement time.
    rate : float
        Sampling rate of the generated channels.
    seed : int
    """

    cohort: str
    hours: float = 4.0
    rem_floor_uv: float = 0.3
    burst_fraction: float = 0.01
    burst_amp_uv: float = 8.0
    tonic_fraction: float = 0.0
    n3_minutes: float = 35.0
    wake_rate: float = 0.15
    alpha_rem: float = 1.5
    alpha_n2: float = 0.8
    alpha_n3: float = 0.8
    alpha_w: float = 0.4
    nrem_tone_gain: float = 1.0
    eeg_gain: float = 1.0
    unscored_rate: float = 0.02
    rate: float = 200.0
    seed: int = 0

    def __post_init__(self):
        if self.cohort not in COHORTS:
            raise ArgumentError(f"cohort must be one of {COHORTS}")
        positive = ("hours", "rem_floor_uv", "burst_amp_uv", "n3_minutes", "nrem_tone_gain",
                    "eeg_gain", "rate")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ArgumentError(f"{name} must be positive")
        for name in ("burst_fraction", "tonic_fraction", "wake_rate", "unscored_rate"):
            if not 0 <= getattr(self, name) < 1:
                raise ArgumentError(f"{name} must lie in [0, 1)")


def sample_profile(cohort, seed, hours=4.0, rate=200.0):
    """Draw a subject profile from the cohort distribution."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x50524F46]))
    common = dict(hours=hours, rate=rate, seed=int(seed),
                  alpha_n2=rng.uniform(0.3, 1.3), alpha_n3=rng.uniform(0.3, 1.3),
                  alpha_w=rng.uniform(0.1, 0.6), nrem_tone_gain=rng.lognormal(0.0, 0.25),
                  eeg_gain=rng.lognormal(0.0, 0.15), unscored_rate=0.02)
    if cohort == "HC":
        return SyntheticProfile(
            "HC", rem_floor_uv=rng.uniform(0.2, 0.4), burst_fraction=rng.uniform(0.0, 0.02),
            burst_amp_uv=rng.uniform(3.0, 8.0), tonic_fraction=0.0,
            n3_minutes=rng.uniform(28.0, 45.0), wake_rate=rng.uniform(0.05, 0.2),
            alpha_rem=rng.uniform(1.2, 2.2), **common)
    if cohort == "RBD":
        return SyntheticProfile(
            "RBD", rem_floor_uv=rng.uniform(0.3, 0.6), burst_fraction=rng.uniform(0.25, 0.55),
            burst_amp_uv=rng.uniform(5.0, 25.0), tonic_fraction=rng.uniform(0.0, 0.25),
            n3_minutes=rng.uniform(12.0, 30.0), wake_rate=rng.uniform(0.15, 0.4),
            alpha_rem=rng.uniform(0.2, 1.0), **common)
    raise ArgumentError(f"unknown cohort {cohort!r}")


# --- hypnogram ------------------------------------------------------------------

def _minutes(rng, lo, hi):
    return max(1, int(round(rng.uniform(lo, hi) * 2)))


def generate_hypnogram(p, rng):
    """Cycle-structured stage sequence with ``hours * 120`` epochs."""
    n = int(round(p.hours * 3600 / EPOCH_LEN))
    seq = ["W"] * _minutes(rng, 8, 25)
    cycle = 0
    while len(seq) < n:
        n3 = max(0, int(round(2 * p.n3_minutes * 0.55 ** cycle * rng.uniform(0.7, 1.3))))
        blocks = [("N1", _minutes(rng, 1, 4)), ("N2", _minutes(rng, 10, 25)), ("N3", n3),
                  ("N2", _minutes(rng, 8, 20)), ("REM", _minutes(rng, 6 + 5 * cycle, 12 + 7 * cycle))]
        for stage, length in blocks:
            if stage in ("N2", "N3") and rng.random() < p.wake_rate:
                cut = int(rng.integers(0, length + 1))
                seq += [stage] * cut + ["W"] * int(rng.integers(1, 6)) + ["N1"] * int(rng.integers(1, 3))
                seq += [stage] * (length - cut)
            else:
                seq += [stage] * length
        if rng.random() < p.wake_rate:
            seq += ["W"] * int(rng.integers(1, 8))
        cycle += 1
    seq = seq[:n]
    return seq


# --- signal pieces --------------------------------------------------------------

def _band_noise(rng, n, rate, lo, hi):
    """Unit-RMS noise with a flat spectrum between ``lo`` and ``hi``."""
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / rate)
    spec[(f < lo) | (f >= hi)] = 0.0
    x = np.fft.irfft(spec, n=n)
    return x / (np.sqrt(np.mean(x * x)) or 1.0)


def _coloured_noise(rng, n, rate, alpha, lo=8.0):
    """Unit-RMS noise with power ~ f^-alpha above ``lo`` Hz."""
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / rate)
    gain = np.zeros_like(f)
    sel = f >= lo
    gain[sel] = f[sel] ** (-alpha / 2.0)
    x = np.fft.irfft(spec * gain, n=n)
    return x / (np.sqrt(np.mean(x * x)) or 1.0)


def _stage_weights(stage_idx, per_epoch, n, rate):
    """Per-sample one-hot stage weights, cross-faded over one second."""
    w = np.zeros((len(STAGES), n))
    samples = np.repeat(stage_idx, per_epoch)[:n]
    w[samples, np.arange(n)] = 1.0
    return ndimage.uniform_filter1d(w, size=int(rate), axis=1, mode="nearest")


def _events(rng, n, rate, rate_per_s, kernel):
    """Random events (per-sample Bernoulli) convolved with ``kernel``."""
    p = np.clip(np.asarray(rate_per_s) / rate, 0.0, 1.0)
    onsets = (rng.random(n) < p).astype(float)
    amps = rng.uniform(0.5, 1.5, n) * rng.choice([-1.0, 1.0], n)
    return signal.oaconvolve(onsets * amps, kernel, mode="full")[:n]


def _slow_modulation(rng, n, rate, depth, corr_s=20.0):
    """Log-normal amplitude modulation with ~``corr_s`` correlation time."""
    m = int(np.ceil(n / rate)) + 1
    g = ndimage.gaussian_filter1d(rng.standard_normal(m), corr_s / 2.0)
    g /= g.std() or 1.0
    per_s = np.exp(depth * g)
    return np.interp(np.arange(n) / rate, np.arange(m), per_s)


def _burst_envelope(rng, n, rate, rem, frac, amp_uv):
    """Sum of boxcar bursts (0.5-4 s) starting inside REM, as an RMS envelope."""
    mean_dur = 2.25
    rate_per_s = -np.log1p(-frac) / mean_dur if frac > 0 else 0.0
    p = rate_per_s / rate
    u = rng.random(n)
    durs = (rng.uniform(0.5, 4.0, n) * rate).astype(np.int64)
    amps = amp_uv * rng.lognormal(0.0, 0.4, n)
    starts = np.nonzero((u < p) & rem)[0]
    d = np.zeros(n + 1)
    np.add.at(d, starts, amps[starts])
    np.add.at(d, np.minimum(starts + durs[starts], n), -amps[starts])
    env = np.cumsum(d)[:n]
    return ndimage.uniform_filter1d(env, size=max(1, int(0.02 * rate)))


def generate_subject(p):
    """Synthetic recording and its ground-truth hypnogram.

    Returns
    -------
    Recording, Hypnogram
        Channels ``C4-A1``, ``C3-A2``, ``ROC``, ``LOC`` and ``Chin EMG``.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(p.seed), 0x53594E54]))
    rate = float(p.rate)
    stages = generate_hypnogram(p, rng)
    per_epoch = int(round(EPOCH_LEN * rate))
    n = len(stages) * per_epoch
    sidx = np.array([_STAGE_INDEX[s] for s in stages])
    w = _stage_weights(sidx, per_epoch, n, rate)
    epoch_of = np.arange(n) // per_epoch
    rem = sidx[epoch_of] == _STAGE_INDEX["REM"]

    # EEG
    eeg = np.zeros(n)
    for band, (lo, hi) in _EEG_BANDS.items():
        jitter = np.exp(_EEG_JITTER * rng.standard_normal(len(stages)))
        gain = (w.T @ np.asarray(_EEG_RMS[band])) * np.repeat(jitter, per_epoch)[:n]
        eeg += gain * _band_noise(rng, n, rate, lo, hi)
    spindles = _events(rng, n, rate, 0.15 * w[_STAGE_INDEX["N2"]],
                       8.0 * np.hanning(int(rate)) * np.sin(2 * np.pi * 13.0 * np.arange(int(rate)) / rate))
    eeg = p.eeg_gain * (eeg + spindles)
    eeg2 = 0.9 * eeg + 2.0 * _band_noise(rng, n, rate, 0.5, 40.0)

    # eye movements
    t_k = np.arange(int(1.5 * rate)) / rate
    saccade = 60.0 * (1.0 - np.exp(-t_k / 0.03)) * np.exp(-t_k / 0.6)
    blink = 100.0 * np.exp(-0.5 * ((t_k - 0.2) / 0.07) ** 2)
    phasic_rem = np.repeat(rng.random(len(stages)) < 0.6, per_epoch)[:n]
    eye = _events(rng, n, rate, 1.2 * w[_STAGE_INDEX["REM"]] * phasic_rem + 0.4 * w[_STAGE_INDEX["W"]], saccade)
    eye += np.abs(_events(rng, n, rate, 0.3 * w[_STAGE_INDEX["W"]], blink))
    eye += (30.0 * w[_STAGE_INDEX["N1"]] + 4.0) * _band_noise(rng, n, rate, 0.05, 0.5)
    common = 0.15 * eeg
    roc = 0.5 * eye + common + 2.0 * _band_noise(rng, n, rate, 0.3, 40.0)
    loc = -0.5 * eye + common + 2.0 * _band_noise(rng, n, rate, 0.3, 40.0)

    # chin EMG: stage-coloured carriers times a tone envelope
    alphas = (p.alpha_w, p.alpha_n2, p.alpha_n2, p.alpha_n3, p.alpha_rem)
    tone = np.array(_EMG_TONE + (p.rem_floor_uv,))
    tone[1:4] *= p.nrem_tone_gain
    # slow tone fluctuations outside REM only; the REM floor stays flat
    mod = _slow_modulation(rng, n, rate, 0.35)
    rem_w = w[_STAGE_INDEX["REM"]]
    env = (w.T @ tone) * (rem_w + (1.0 - rem_w) * mod)
    carrier = np.zeros(n)
    for k, a in enumerate(alphas):
        if w[k].any():
            carrier += w[k] * _coloured_noise(rng, n, rate, a)
    rem_epochs = np.nonzero(sidx == _STAGE_INDEX["REM"])[0]
    tonic = np.zeros(len(stages))
    tonic[rem_epochs[rng.random(rem_epochs.size) < p.tonic_fraction]] = rng.uniform(3.0, 6.0)
    env += np.repeat(tonic, per_epoch)[:n] * w[_STAGE_INDEX["REM"]]
    env += _burst_envelope(rng, n, rate, rem, p.burst_fraction, p.burst_amp_uv)
    emg = env * carrier
    emg += _MAINS_UV * np.sin(2 * np.pi * 50.0 * np.arange(n) / rate)

    labels = list(stages)
    for i, s in enumerate(labels):
        if s == "W" and rng.random() < p.unscored_rate:
            labels[i] = UNSCORED
    duration = n / rate
    chans = [Channel("C4-A1", eeg, rate), Channel("C3-A2", eeg2, rate),
             Channel("ROC", roc, rate), Channel("LOC", loc, rate), Channel("Chin EMG", emg, rate)]
    rec = Recording(chans, datetime(2000, 1, 1, 22, 0, 0), duration)
    return rec, Hypnogram(tuple(labels))


def generate_cohort(n_hc, n_rbd, hours=4.0, seed=0, rate=200.0):
    """Profiles for ``n_hc`` controls and ``n_rbd`` RBD-like subjects.

    Subject seeds derive from ``seed`` and the subject's position, so a
    subject's data does not depend on the cohort size of the other group.
    """
    out = []
    for cohort, count in (("HC", n_hc), ("RBD", n_rbd)):
        for i in range(count):
            sub_seed = int(np.random.SeedSequence([int(seed), COHORTS.index(cohort), i]).generate_state(1)[0])
            out.append((f"{cohort.lower()}{i + 1:03d}", sample_profile(cohort, sub_seed, hours, rate)))
    return out


def with_burst_fraction(p, frac):
    return replace(p, burst_fraction=frac)
