"""Windowed EMG quantities shared by per-epoch features and full-night metrics.

All amplitudes are in µV.  Windows are aligned to the start of the signal,
so with 1-s windows and 30-s epochs window ``i`` belongs to epoch ``i // 30``.
"""

import numpy as np

from .dsp import centered_moving_min, window_view

ATONIA_LOW = 1.0
ATONIA_HIGH = 2.0


def window_amplitudes(emg, rate, win_s=1.0):
    """Mean rectified amplitude of consecutive windows."""
    return np.abs(window_view(emg, rate, win_s)).mean(axis=-1)


def correct_amplitudes(amp, span_s=60.0, win_s=1.0):
    """Subtract the minimum amplitude found in a centred ``span_s`` neighbourhood."""
    half = int(round(span_s / (2 * win_s)))
    return amp - centered_moving_min(amp, half)


def atonia_ratio(amp, axis=-1):
    """Share of windows <= 1 µV, ignoring windows strictly between 1 and 2 µV.

    Returns NaN where no window is left after the exclusion.
    """
    amp = np.asarray(amp, dtype=np.float64)
    low = (amp <= ATONIA_LOW).sum(axis=axis)
    mid = ((amp > ATONIA_LOW) & (amp < ATONIA_HIGH)).sum(axis=axis)
    denom = amp.shape[axis] - mid
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, low / np.maximum(denom, 1), np.nan)


def window_variances(emg, rate, win_s=1.0):
    return window_view(emg, rate, win_s).var(axis=-1)


# --- motor activity --------------------------------------------------------------

ENVELOPE_BLOCK_S = 0.05


def envelope(emg, rate, block_s=ENVELOPE_BLOCK_S):
    """Rectified EMG smoothed by averaging over consecutive ``block_s`` blocks."""
    return np.abs(window_view(emg, rate, block_s)).mean(axis=-1)


def moving_baseline(env, env_rate, window_s=1800.0, step_s=30.0, percentile=5.0):
    """Low percentile of the envelope over a centred sliding window.

    The percentile is evaluated once per ``step_s`` block (one scoring epoch
    by default) and held constant within the block.
    """
    env = np.asarray(env, dtype=np.float64)
    n = env.shape[0]
    step = max(1, int(round(step_s * env_rate)))
    half = int(round(window_s * env_rate / 2))
    out = np.empty(n)
    for s in range(0, n, step):
        c = s + step // 2
        lo, hi = max(0, c - half), min(n, c + half)
        out[s: s + step] = np.percentile(env[lo:hi], percentile)
    return out


def _runs(mask):
    """Start/stop indices of runs of True."""
    m = np.concatenate([[False], np.asarray(mask, dtype=bool), [False]])
    d = np.diff(m.astype(np.int8))
    return np.nonzero(d == 1)[0], np.nonzero(d == -1)[0]


def detect_events(env, baseline, env_rate, threshold_factor=2.0, min_duration_s=0.3,
                  inter_event_s=0.5):
    """Boolean mask of motor-activity events on the envelope grid.

    A sample is active when the envelope exceeds ``threshold_factor`` times
    the baseline.  Active runs shorter than ``min_duration_s`` are dropped,
    then events separated by gaps shorter than ``inter_event_s`` are merged.
    """
    above = np.asarray(env) > threshold_factor * np.asarray(baseline)
    starts, stops = _runs(above)
    dt = 1.0 / env_rate
    keep = (stops - starts) * dt >= min_duration_s - 1e-9
    starts, stops = starts[keep], stops[keep]
    out = np.zeros(above.shape[0], dtype=bool)
    if starts.size == 0:
        return out
    merged = [[starts[0], stops[0]]]
    for s, e in zip(starts[1:], stops[1:]):
        if (s - merged[-1][1]) * dt < inter_event_s - 1e-9:
            merged[-1][1] = e
        else:
            merged.append([s, e])
    for s, e in merged:
        out[s:e] = True
    return out


def motor_mask(emg, rate, threshold_factor=2.0, min_duration_s=0.3, inter_event_s=0.5,
               baseline_window_s=1800.0, block_s=ENVELOPE_BLOCK_S):
    """Envelope-grid event mask for a whole recording, plus the envelope rate."""
    env = envelope(emg, rate, block_s)
    env_rate = 1.0 / block_s
    base = moving_baseline(env, env_rate, window_s=baseline_window_s)
    return detect_events(env, base, env_rate, threshold_factor, min_duration_s, inter_event_s), env_rate
