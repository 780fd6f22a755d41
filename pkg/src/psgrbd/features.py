"""Per-epoch feature bank computed from EEG, EOG and chin EMG.

Every family function takes epochs shaped ``(..., n_minis, n_samples)``
(one 30-s epoch split into three 10-s mini-epochs) and returns an ordered
dict of feature name to array of shape ``(...)``.  Mini-epoch statistics are
averaged over the epoch unless the feature says otherwise.

The canonical schema (:data:`SCHEMA`) fixes the column order used by
:class:`FeatureMatrix` and every trained model.
"""

import csv
import hashlib
import io
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import binio, dsp, emg as emgmod
from ._backend import permutation_entropy_rows
from .errors import ArgumentError, SchemaError

SCHEMA_VERSION = "psgrbd-features-1"
N_DERIVATIVES = 10
PE_ORDER = 10
PE_DECIMATION = 4
EOG_PEAK_GUARD_S = 0.25
EMG_FRACTAL_BAND = (10.0, 80.0)
EMG_FRACTAL_EXCLUDE = ((48.0, 52.0), (58.0, 62.0))
EMG_GAMMA = (30.0, 100.0)
EMG_REL_NUM = (12.5, 21.0)
EMG_REL_DEN = (8.0, 32.0)
TKEO_BANDS = ("delta", "lowalpha", "alpha")


# --- schema ----------------------------------------------------------------------

def _schema_entries():
    e = []
    add = lambda name, ch, cat: e.append((name, ch, cat))  # noqa: E731
    add("eeg_zcr", "EEG", "time")
    for n in ("activity", "mobility", "complexity"):
        add(f"eeg_hjorth_{n}", "EEG", "time")
    for k in range(1, N_DERIVATIVES + 1):
        add(f"eeg_d{k}_logamp", "EEG", "time")
        add(f"eeg_d{k}_lowpower", "EEG", "time")
    add("eeg_iqr", "EEG", "time")
    for s in ("mean", "min", "max"):
        add(f"eeg_coastline_{s}", "EEG", "time")
    for b in dsp.CLINICAL_BANDS:
        add(f"eeg_stft_{b}", "EEG", "frequency")
    for b in dsp.RSP_BANDS:
        add(f"eeg_rsp_{b}", "EEG", "frequency")
    add("eeg_sef95", "EEG", "frequency")
    for b in TKEO_BANDS:
        add(f"eeg_tkeo_{b}_mean", "EEG", "nonlinear")
        add(f"eeg_tkeo_{b}_std", "EEG", "nonlinear")
    for b in dsp.CLINICAL_BANDS:
        add(f"eeg_seo_{b}_mean", "EEG", "nonlinear")
        add(f"eeg_seo_{b}_std", "EEG", "nonlinear")
    for n in ("acorr_peak", "var", "max_peak", "second_peak", "diff_mean", "diff_max",
              "power_ratio", "dwt_haar", "dwt_db2", "perm_entropy"):
        add(f"eog_{n}", "EOG", "time" if n not in ("power_ratio",) else "frequency")
    add("xc_pvalue", "EEG+EOG", "time")
    for b in dsp.CLINICAL_BANDS:
        add(f"xc_coherence_{b}", "EEG+EOG", "frequency")
    for n in ("atonia", "energy", "p75", "entropy", "motor_s"):
        add(f"emg_{n}", "EMG", "time")
    for n in ("fractal", "gamma_power", "rel_power", "sef95"):
        add(f"emg_{n}", "EMG", "frequency")
    add("hours_recorded", "NA", "time")
    return e


@dataclass(frozen=True)
class FeatureSchema:
    names: tuple
    channels: tuple
    categories: tuple
    version: str = SCHEMA_VERSION

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise SchemaError("feature names must be unique")

    @property
    def M(self):
        return len(self.names)

    @property
    def hash(self):
        h = hashlib.sha256((self.version + "\n" + "\n".join(self.names)).encode("utf-8"))
        return h.hexdigest()[:16]

    def index(self, name):
        return self.names.index(name)

    def subset(self, names):
        pos = [self.names.index(n) for n in names]
        return FeatureSchema(tuple(names), tuple(self.channels[i] for i in pos),
                             tuple(self.categories[i] for i in pos), self.version)

    @classmethod
    def from_names(cls, names, version=SCHEMA_VERSION):
        names = tuple(names)
        return cls(names, ("NA",) * len(names), ("NA",) * len(names), version)


_ENTRIES = _schema_entries()
SCHEMA = FeatureSchema(tuple(n for n, _, _ in _ENTRIES), tuple(c for _, c, _ in _ENTRIES),
                       tuple(k for _, _, k in _ENTRIES))


# --- helpers ---------------------------------------------------------------------

def _safe_div(a, b):
    a, b = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    out = np.zeros(a.shape)
    np.divide(a, b, out=out, where=b > 0)
    return out


def _check_epoch(ep):
    ep = np.asarray(ep, dtype=np.float64)
    if ep.ndim < 2:
        raise ArgumentError("epochs must be shaped (..., n_minis, n_samples)")
    return ep


def _mobility(x):
    dx = np.diff(x, axis=-1)
    return np.sqrt(_safe_div(dx.var(axis=-1), x.var(axis=-1))), dx


def hjorth(x):
    """Hjorth activity, mobility (rad/sample) and complexity along the last axis.

    A constant signal has mobility and complexity 0.
    """
    x = np.asarray(x, dtype=np.float64)
    mob, dx = _mobility(x)
    mob_d, _ = _mobility(dx)
    return x.var(axis=-1), mob, _safe_div(mob_d, mob)


def zero_crossing_rate(x, rate):
    """Crossings of the mean level per second."""
    x = np.asarray(x, dtype=np.float64)
    s = (x - x.mean(axis=-1, keepdims=True)) > 0
    crossings = (s[..., 1:] != s[..., :-1]).sum(axis=-1)
    return crossings / (x.shape[-1] / rate)


def _band_filter(x, rate, lo, hi):
    """Zero-phase brick-wall band-pass of each row via the FFT."""
    n = x.shape[-1]
    X = np.fft.rfft(x, axis=-1)
    f = np.fft.rfftfreq(n, 1.0 / rate)
    X[..., (f < lo) | (f >= hi)] = 0.0
    return np.fft.irfft(X, n=n, axis=-1)


def tkeo(x):
    """Teager-Kaiser energy x[n]^2 - x[n-1] x[n+1] (drops the end samples)."""
    x = np.asarray(x, dtype=np.float64)
    return x[..., 1:-1] ** 2 - x[..., :-2] * x[..., 2:]


def permutation_entropy(x, order=PE_ORDER, delay=1):
    """Normalised permutation entropy of the rows of ``x`` (in [0, 1])."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1, x.shape[-1])
    return permutation_entropy_rows(flat, order, delay).reshape(x.shape[:-1])


def _decimate_blocks(x, q):
    n = x.shape[-1] // q
    return x[..., : n * q].reshape(x.shape[:-1] + (n, q)).mean(axis=-1)


def autocorrelation_peak(x):
    """Highest normalised (unbiased) autocorrelation beyond the central lobe.

    The central lobe ends at the first negative lag value; lags up to half
    the window are searched.  Returns 0 when the sequence never turns
    negative or the signal has no variance.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    xc = x - x.mean(axis=-1, keepdims=True)
    spec = np.fft.rfft(xc, n=2 * n, axis=-1)
    r = np.fft.irfft(np.abs(spec) ** 2, n=2 * n, axis=-1)[..., :n]
    r = r / (n - np.arange(n))
    r = _safe_div(r, r[..., :1])
    half = n // 2
    r = r[..., :half]
    neg = r < 0
    has = neg.any(axis=-1)
    first = np.argmax(neg, axis=-1)
    lags = np.arange(half)
    masked = np.where(lags >= first[..., None], r, -np.inf)
    return np.where(has, masked.max(axis=-1), 0.0)


def _second_peak(x, guard):
    a = np.abs(x)
    k = np.argmax(a, axis=-1)
    idx = np.arange(x.shape[-1])
    masked = np.where(np.abs(idx - k[..., None]) <= guard, -np.inf, a)
    out = masked.max(axis=-1)
    return np.where(np.isfinite(out), out, 0.0)


def _histogram_entropy(x, bins=256):
    """Shannon entropy (nats) of a 256-bin amplitude histogram, per row."""
    flat = x.reshape(-1, x.shape[-1])
    lo = flat.min(axis=-1, keepdims=True)
    span = flat.max(axis=-1, keepdims=True) - lo
    idx = np.where(span > 0, np.floor(_safe_div(flat - lo, span) * bins), 0).astype(np.int64)
    idx = np.clip(idx, 0, bins - 1)
    counts = np.zeros((flat.shape[0], bins))
    np.add.at(counts, (np.arange(flat.shape[0])[:, None], idx), 1.0)
    p = counts / flat.shape[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(p > 0, p * np.log(p), 0.0).sum(axis=-1)
    return h.reshape(x.shape[:-1])


def fractal_exponent(freqs, dens, band=EMG_FRACTAL_BAND, exclude=EMG_FRACTAL_EXCLUDE):
    """Negative log-log slope of a PSD over ``band`` (notch neighbourhoods excluded).

    Rows without power in the band get 0.
    """
    sel = (freqs >= band[0]) & (freqs <= band[1])
    for lo, hi in exclude:
        sel &= ~((freqs >= lo) & (freqs <= hi))
    lf = np.log10(freqs[sel])
    p = dens[..., sel]
    ok = (p > 0).all(axis=-1)
    lp = np.log10(np.where(p > 0, p, 1.0))
    lfc = lf - lf.mean()
    slope = (lp * lfc).sum(axis=-1) / (lfc ** 2).sum()
    return np.where(ok, -slope, 0.0)


def _mean_density(freqs, dens, lo, hi):
    sel = (freqs >= lo) & (freqs <= hi)
    return dens[..., sel].mean(axis=-1)


# --- feature families --------------------------------------------------------------

def eeg_time_features(ep, rate=dsp.TARGET_RATE):
    ep = _check_epoch(ep)
    out = OrderedDict()
    out["eeg_zcr"] = zero_crossing_rate(ep, rate).mean(axis=-1)
    act, mob, comp = hjorth(ep)
    out["eeg_hjorth_activity"] = act.mean(axis=-1)
    out["eeg_hjorth_mobility"] = mob.mean(axis=-1)
    out["eeg_hjorth_complexity"] = comp.mean(axis=-1)
    d = ep
    for k in range(1, N_DERIVATIVES + 1):
        d = np.diff(d, axis=-1)
        mag = np.abs(d)
        m = mag.mean(axis=-1)
        out[f"eeg_d{k}_logamp"] = np.log1p(m).mean(axis=-1)
        # low-power share: samples whose magnitude is under half the mean magnitude
        out[f"eeg_d{k}_lowpower"] = (mag < 0.5 * m[..., None]).mean(axis=-1).mean(axis=-1)
    p75, p25 = np.percentile(ep, [75, 25], axis=-1)
    out["eeg_iqr"] = (p75 - p25).mean(axis=-1)
    coast = np.abs(np.diff(ep, axis=-1)).sum(axis=-1)
    out["eeg_coastline_mean"] = coast.mean(axis=-1)
    out["eeg_coastline_min"] = coast.min(axis=-1)
    out["eeg_coastline_max"] = coast.max(axis=-1)
    return out


def eeg_freq_features(ep, rate=dsp.TARGET_RATE):
    ep = _check_epoch(ep)
    out = OrderedDict()
    f, _, mag = dsp.stft(ep, rate)
    for b, m in dsp.band_magnitudes(f, mag).items():
        out[f"eeg_stft_{b}"] = m.mean(axis=-1).mean(axis=-1)
    f, p = dsp.psd(ep, rate, window_s=2.0)
    p = p.mean(axis=-2)
    powers = {}
    for b in dsp.RSP_BANDS:
        lo, hi = dsp.BANDS[b]
        powers[b] = dsp.band_power(f, p, lo, hi, closed=(b == dsp.RSP_BANDS[-1]))
    total = sum(powers.values())
    for b in dsp.RSP_BANDS:
        out[f"eeg_rsp_{b}"] = _safe_div(powers[b], total)
    out["eeg_sef95"] = dsp.spectral_edge(f, p, 0.95)
    return out


def eeg_nonlinear_features(ep, rate=dsp.TARGET_RATE):
    ep = _check_epoch(ep)
    out = OrderedDict()
    filtered = {b: _band_filter(ep, rate, *dsp.BANDS[b]) for b in dsp.CLINICAL_BANDS}
    for b in TKEO_BANDS:
        psi = tkeo(filtered[b])
        out[f"eeg_tkeo_{b}_mean"] = psi.mean(axis=-1).mean(axis=-1)
        out[f"eeg_tkeo_{b}_std"] = psi.std(axis=-1).mean(axis=-1)
    for b in dsp.CLINICAL_BANDS:
        seo = filtered[b] ** 2
        out[f"eeg_seo_{b}_mean"] = seo.mean(axis=-1).mean(axis=-1)
        out[f"eeg_seo_{b}_std"] = seo.std(axis=-1).mean(axis=-1)
    return out


def eog_features(ep, rate=dsp.TARGET_RATE):
    ep = _check_epoch(ep)
    out = OrderedDict()
    out["eog_acorr_peak"] = autocorrelation_peak(ep).mean(axis=-1)
    out["eog_var"] = ep.var(axis=-1).mean(axis=-1)
    out["eog_max_peak"] = np.abs(ep).max(axis=-1).mean(axis=-1)
    out["eog_second_peak"] = _second_peak(ep, int(round(EOG_PEAK_GUARD_S * rate))).mean(axis=-1)
    diff = np.abs(np.diff(ep, axis=-1)).mean(axis=-1)
    out["eog_diff_mean"] = diff.mean(axis=-1)
    out["eog_diff_max"] = diff.max(axis=-1)
    f, p = dsp.psd(ep, rate, window_s=2.0)
    out["eog_power_ratio"] = _safe_div(dsp.band_power(f, p, 0.0, 4.0), p.sum(axis=-1) * (f[1] - f[0])).mean(axis=-1)
    for w in ("haar", "db2"):
        rec = dsp.detail_reconstruction(ep, w, 4)
        out[f"eog_dwt_{w}"] = np.abs(rec).max(axis=-1).mean(axis=-1)
    out["eog_perm_entropy"] = permutation_entropy(_decimate_blocks(ep, PE_DECIMATION)).mean(axis=-1)
    return out


def pearson_pvalue(x, y):
    """Two-sided p-value of Pearson's r via the t transform (n - 2 dof).

    A constant input gives p = 1; perfect (anti)correlation gives p = 0.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.shape[-1]
    xc = x - x.mean(axis=-1, keepdims=True)
    yc = y - y.mean(axis=-1, keepdims=True)
    den = np.sqrt((xc ** 2).sum(axis=-1) * (yc ** 2).sum(axis=-1))
    r = np.clip(_safe_div((xc * yc).sum(axis=-1), den), -1.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = r * np.sqrt((n - 2) / np.maximum(1.0 - r * r, 0.0))
    p = 2.0 * stats.t.sf(np.abs(t), n - 2)
    p = np.where(np.abs(r) >= 1.0, 0.0, p)
    return np.where(den > 0, p, 1.0), r


def cross_features(eeg_ep, eog_ep, rate=dsp.TARGET_RATE):
    eeg_ep = _check_epoch(eeg_ep)
    eog_ep = _check_epoch(eog_ep)
    out = OrderedDict()
    p, _ = pearson_pvalue(eeg_ep, eog_ep)
    out["xc_pvalue"] = p.mean(axis=-1)
    f, c = dsp.coherence(eeg_ep, eog_ep, rate)
    for b in dsp.CLINICAL_BANDS:
        lo, hi = dsp.BANDS[b]
        sel = (f >= lo) & (f < hi)
        out[f"xc_coherence_{b}"] = c[..., sel].mean(axis=-1).mean(axis=-1)
    return out


def emg_features(ep, rate=dsp.TARGET_RATE, corrected_amplitudes=None, motor_seconds=None):
    """EMG features over the whole 30-s epoch.

    ``corrected_amplitudes`` (``(..., 30)`` noise-corrected 1-s amplitudes)
    and ``motor_seconds`` come from night-level processing in
    :func:`extract_all`; when absent they are derived from the epoch alone.
    """
    ep = _check_epoch(ep)
    x = ep.reshape(ep.shape[:-2] + (-1,))
    out = OrderedDict()
    if corrected_amplitudes is None:
        amp = emgmod.window_amplitudes(x, rate)
        corrected_amplitudes = amp - amp.min(axis=-1, keepdims=True)
    out["emg_atonia"] = emgmod.atonia_ratio(corrected_amplitudes)
    out["emg_energy"] = np.abs(x).mean(axis=-1)
    out["emg_p75"] = np.percentile(x, 75, axis=-1)
    out["emg_entropy"] = _histogram_entropy(x)
    if motor_seconds is None:
        flat = x.reshape(-1, x.shape[-1])
        motor_seconds = np.array([
            emgmod.motor_mask(row, rate, baseline_window_s=x.shape[-1] / rate)[0].sum() * emgmod.ENVELOPE_BLOCK_S
            for row in flat
        ]).reshape(x.shape[:-1])
    out["emg_motor_s"] = np.asarray(motor_seconds, dtype=np.float64)
    f, p = dsp.psd(x, rate, window_s=4.0)
    out["emg_fractal"] = fractal_exponent(f, p)
    out["emg_gamma_power"] = _mean_density(f, p, *EMG_GAMMA)
    out["emg_rel_power"] = _safe_div(_mean_density(f, p, *EMG_REL_NUM), _mean_density(f, p, *EMG_REL_DEN))
    out["emg_sef95"] = dsp.spectral_edge(f, p, 0.95)
    return out


def hours_recorded(epoch_index, epoch_len=30.0):
    """Time since recording start, in hours, at the start of the epoch."""
    epoch_index = np.asarray(epoch_index)
    if np.any(epoch_index < 0):
        raise ArgumentError("epoch index must be non-negative")
    return epoch_index * epoch_len / 3600.0


# --- feature matrix ------------------------------------------------------------------

@dataclass
class FeatureMatrix:
    """Per-epoch feature rows for one subject (or a concatenation of subjects)."""

    schema: FeatureSchema
    rows: np.ndarray
    subject_id: str = ""
    staging_source: str = "none"
    imputed: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64).reshape(-1, self.schema.M)
        if not np.isfinite(self.rows).all():
            raise ArgumentError("feature rows must be finite")

    def __len__(self):
        return self.rows.shape[0]

    def column(self, name):
        return self.rows[:, self.schema.index(name)]

    def append(self, other):
        if other.schema.hash != self.schema.hash:
            raise SchemaError(f"schema {other.schema.hash} does not match {self.schema.hash}")
        imputed = dict(self.imputed)
        for k, v in other.imputed.items():
            imputed[k] = imputed.get(k, 0) + v
        return FeatureMatrix(self.schema, np.vstack([self.rows, other.rows]), self.subject_id,
                             self.staging_source, imputed)

    # CSV: header row of names; a comment line carries the schema hash
    def to_csv(self):
        buf = io.StringIO()
        buf.write(f"# schema={self.schema.version} hash={self.schema.hash} subject={self.subject_id}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.schema.names)
        for r in self.rows:
            w.writerow([repr(float(v)) for v in r])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text, schema=SCHEMA):
        lines = text.splitlines()
        meta = {}
        if lines and lines[0].startswith("#"):
            meta = dict(tok.split("=", 1) for tok in lines[0][1:].split() if "=" in tok)
            lines = lines[1:]
        reader = csv.reader(lines)
        names = tuple(next(reader))
        if names != schema.names:
            raise SchemaError("CSV columns do not match the feature schema")
        if meta.get("hash", schema.hash) != schema.hash:
            raise SchemaError(f"CSV schema hash {meta['hash']} != {schema.hash}")
        rows = [[float(v) for v in r] for r in reader if r]
        return cls(schema, np.array(rows).reshape(-1, schema.M), meta.get("subject", ""))

    def to_bytes(self):
        meta = {"schema_hash": self.schema.hash, "schema_version": self.schema.version,
                "names": list(self.schema.names), "subject_id": self.subject_id,
                "staging_source": self.staging_source,
                "imputed": {k: int(v) for k, v in sorted(self.imputed.items())}}
        return binio.dumps("feature-matrix", 1, meta, {"rows": self.rows})

    @classmethod
    def from_bytes(cls, data):
        _, meta, arrays = binio.loads(data, kind="feature-matrix")
        schema = SCHEMA if tuple(meta["names"]) == SCHEMA.names else FeatureSchema.from_names(
            meta["names"], meta["schema_version"])
        if schema.hash != meta["schema_hash"]:
            raise SchemaError("stored schema hash does not match its names")
        return cls(schema, arrays["rows"], meta["subject_id"], meta["staging_source"], meta["imputed"])


def epoch_features(eeg_ep, eog_ep, emg_ep, epoch_index, rate=dsp.TARGET_RATE,
                   corrected_amplitudes=None, motor_seconds=None):
    """All families for a batch of epochs, in schema order (non-finite values kept)."""
    parts = OrderedDict()
    parts.update(eeg_time_features(eeg_ep, rate))
    parts.update(eeg_freq_features(eeg_ep, rate))
    parts.update(eeg_nonlinear_features(eeg_ep, rate))
    parts.update(eog_features(eog_ep, rate))
    parts.update(cross_features(eeg_ep, eog_ep, rate))
    parts.update(emg_features(emg_ep, rate, corrected_amplitudes, motor_seconds))
    parts["hours_recorded"] = hours_recorded(epoch_index)
    return np.stack([np.broadcast_to(parts[n], np.shape(epoch_index)) for n in SCHEMA.names], axis=-1)


def extract_all(triplet, grid=None, subject_id="", atonia_span_s=60.0, motor_params=None,
                chunk=120):
    """Feature matrix for a preprocessed triplet, one row per complete epoch.

    Night-level EMG quantities (noise-corrected 1-s amplitudes and motor
    events against a 30-min baseline) are computed on the continuous signal
    before being cut per epoch.  Non-finite values are set to 0 and counted
    per feature in ``FeatureMatrix.imputed``.
    """
    grid = grid or dsp.EpochGrid(rate=triplet.rate)
    rate = grid.rate
    eeg = dsp.segment(triplet.eeg, grid)
    eog = dsp.segment(triplet.eog, grid)
    emg = dsp.segment(triplet.emg, grid)
    n_epochs = eeg.shape[0]
    epoch_s = int(round(grid.epoch_len))

    emg_cont = triplet.emg[: n_epochs * grid.epoch_samples]
    amp = emgmod.correct_amplitudes(emgmod.window_amplitudes(emg_cont, rate), atonia_span_s)
    amp = amp.reshape(n_epochs, epoch_s)
    mp = dict(motor_params or {})
    mask, env_rate = emgmod.motor_mask(emg_cont, rate, **mp)
    per_epoch = int(round(grid.epoch_len * env_rate))
    motor_s = mask[: n_epochs * per_epoch].reshape(n_epochs, per_epoch).sum(axis=1) / env_rate

    rows = np.empty((n_epochs, SCHEMA.M))
    for s in range(0, n_epochs, chunk):
        e = min(n_epochs, s + chunk)
        rows[s:e] = epoch_features(eeg[s:e], eog[s:e], emg[s:e], np.arange(s, e), rate,
                                   amp[s:e], motor_s[s:e])
    bad = ~np.isfinite(rows)
    imputed = {SCHEMA.names[j]: int(bad[:, j].sum()) for j in np.nonzero(bad.any(axis=0))[0]}
    rows[bad] = 0.0
    return FeatureMatrix(SCHEMA, rows, subject_id, "none", imputed)
