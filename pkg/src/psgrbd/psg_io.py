"""EDF ingestion, hypnogram sidecars, montage selection and resampling."""

import logging
import re
from dataclasses import dataclass, field, replace
from datetime import datetime
from fractions import Fraction

import numpy as np
from scipy import signal

from .dsp import TARGET_RATE
from .errors import ArgumentError, DegenerateRecordingError, MontageError, ParseError

log = logging.getLogger(__name__)

STAGES = ("W", "N1", "N2", "N3", "REM")
UNSCORED = "UNSCORED"
EPOCH_LEN = 30.0
MIN_DURATION_S = 300.0

_UNIT_FACTORS = {"uv": 1.0, "µv": 1.0, "μv": 1.0, "mcv": 1.0, "mv": 1e3, "v": 1e6, "nv": 1e-3}


@dataclass
class EdfSignalHeader:
    """Raw per-signal EDF header fields, kept so a parsed file can be re-written exactly."""

    transducer: str = ""
    physical_dim: str = "uV"
    physical_min: str = "-3200"
    physical_max: str = "3200"
    digital_min: str = "-32768"
    digital_max: str = "32767"
    prefilter: str = ""


@dataclass
class Channel:
    label: str
    samples: np.ndarray
    rate: float
    edf: EdfSignalHeader = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)


@dataclass
class Recording:
    """Multichannel recording; samples are in µV."""

    channels: list
    start_time: datetime = field(default_factory=lambda: datetime(2000, 1, 1))
    duration: float = 0.0

    def __post_init__(self):
        labels = [c.label for c in self.channels]
        if len(set(labels)) != len(labels):
            raise ArgumentError(f"duplicate channel labels in {labels}")
        for c in self.channels:
            if not c.rate > 0:
                raise ArgumentError(f"channel {c.label!r} has non-positive rate {c.rate}")
            if abs(c.samples.shape[0] - c.rate * self.duration) > 1.0 + 1e-9:
                raise ArgumentError(
                    f"channel {c.label!r}: {c.samples.shape[0]} samples does not match "
                    f"{c.rate} Hz x {self.duration} s"
                )

    @property
    def labels(self):
        return [c.label for c in self.channels]

    def channel(self, label):
        for c in self.channels:
            if c.label == label:
                return c
        raise KeyError(label)


def require_min_duration(rec, min_s=MIN_DURATION_S):
    """Reject degenerate (too short) recordings."""
    if rec.duration < min_s:
        raise DegenerateRecordingError(
            f"recording lasts {rec.duration:.1f} s; at least {min_s:.0f} s required"
        )
    return rec


# --- EDF -----------------------------------------------------------------------

_SIGNAL_FIELDS = (
    ("label", 16), ("transducer", 80), ("physical_dim", 8), ("physical_min", 8),
    ("physical_max", 8), ("digital_min", 8), ("digital_max", 8), ("prefilter", 80),
    ("n_samples", 8), ("reserved", 32),
)


def _ascii(raw, offset):
    try:
        return raw.decode("ascii").strip()
    except UnicodeDecodeError:
        try:
            return raw.decode("latin-1").strip()
        except UnicodeDecodeError:  # pragma: no cover - latin-1 decodes anything
            raise ParseError("undecodable header text", offset) from None


def _number(text, offset, name, cast=float):
    try:
        return cast(text)
    except ValueError:
        raise ParseError(f"non-numeric {name} field {text!r}", offset) from None


def _parse_start(date, time, offset):
    try:
        dd, mm, yy = (int(p) for p in date.split("."))
        hh, mi, ss = (int(p) for p in time.replace(":", ".").split("."))
        year = 1900 + yy if yy >= 85 else 2000 + yy
        return datetime(year, mm, dd, hh, mi, ss)
    except ValueError:
        raise ParseError(f"bad start date/time {date!r} {time!r}", offset) from None


def parse_edf(data):
    """Decode an EDF file held in memory.

    Parameters
    ----------
    data : bytes
        Complete file contents.

    Returns
    -------
    Recording
        One channel per EDF signal with samples scaled to physical units and
        converted to µV when the physical dimension is a voltage.
    """
    data = bytes(data)
    if len(data) < 256:
        raise ParseError("file shorter than the 256-byte EDF header", len(data))
    version = _ascii(data[0:8], 0)
    if version != "0":
        raise ParseError(f"unsupported EDF version {version!r}", 0)
    start = _parse_start(_ascii(data[168:176], 168), _ascii(data[176:184], 176), 168)
    header_bytes = _number(_ascii(data[184:192], 184), 184, "header size", int)
    n_records = _number(_ascii(data[236:244], 236), 236, "record count", int)
    record_s = _number(_ascii(data[244:252], 244), 244, "record duration")
    ns = _number(_ascii(data[252:256], 252), 252, "signal count", int)
    if ns < 1:
        raise ParseError(f"signal count must be positive, got {ns}", 252)
    if header_bytes != 256 * (ns + 1):
        raise ParseError(f"header size {header_bytes} != 256 * (1 + {ns})", 184)
    if not record_s > 0:
        raise ParseError(f"record duration must be positive, got {record_s}", 244)
    if len(data) < header_bytes:
        raise ParseError("file truncated inside the signal headers", len(data))

    fields = {}
    pos = 256
    for name, width in _SIGNAL_FIELDS:
        fields[name] = [(_ascii(data[pos + i * width: pos + (i + 1) * width], pos + i * width),
                         pos + i * width) for i in range(ns)]
        pos += width * ns

    spr = [_number(t, off, "samples-per-record", int) for t, off in fields["n_samples"]]
    if any(s < 1 for s in spr):
        raise ParseError("samples-per-record must be positive", fields["n_samples"][0][1])
    record_size = 2 * sum(spr)
    body = len(data) - header_bytes
    if n_records == -1:
        if body % record_size:
            raise ParseError("data size is not a whole number of records", header_bytes)
        n_records = body // record_size
    if n_records < 1:
        raise ParseError(f"record count must be positive, got {n_records}", 236)
    if body < n_records * record_size:
        raise ParseError(
            f"header promises {n_records} records of {record_size} bytes, "
            f"file holds {body} data bytes", len(data))
    if body > n_records * record_size:
        raise ParseError("trailing bytes after the last data record", header_bytes + n_records * record_size)

    raw = np.frombuffer(data, dtype="<i2", count=n_records * sum(spr), offset=header_bytes)
    raw = raw.reshape(n_records, sum(spr))
    channels = []
    col = 0
    for i in range(ns):
        hdr = EdfSignalHeader(
            transducer=fields["transducer"][i][0],
            physical_dim=fields["physical_dim"][i][0],
            physical_min=fields["physical_min"][i][0],
            physical_max=fields["physical_max"][i][0],
            digital_min=fields["digital_min"][i][0],
            digital_max=fields["digital_max"][i][0],
            prefilter=fields["prefilter"][i][0],
        )
        pmin, pmax, dmin, dmax = _scaling(hdr, fields, i)
        digital = raw[:, col: col + spr[i]].reshape(-1)
        col += spr[i]
        channels.append(Channel(
            label=fields["label"][i][0],
            samples=_to_physical(digital, pmin, pmax, dmin, dmax, hdr.physical_dim),
            rate=spr[i] / record_s,
            edf=hdr,
        ))
    return Recording(channels=channels, start_time=start, duration=n_records * record_s)


def _scaling(hdr, fields, i):
    pmin = _number(hdr.physical_min, fields["physical_min"][i][1], "physical minimum")
    pmax = _number(hdr.physical_max, fields["physical_max"][i][1], "physical maximum")
    dmin = _number(hdr.digital_min, fields["digital_min"][i][1], "digital minimum", int)
    dmax = _number(hdr.digital_max, fields["digital_max"][i][1], "digital maximum", int)
    if dmax <= dmin:
        raise ParseError("digital maximum must exceed digital minimum", fields["digital_max"][i][1])
    if pmax == pmin:
        raise ParseError("physical range is empty", fields["physical_max"][i][1])
    return pmin, pmax, dmin, dmax


def _unit_factor(dim):
    return _UNIT_FACTORS.get(dim.strip().lower(), 1.0)


def _to_physical(digital, pmin, pmax, dmin, dmax, dim):
    gain = (pmax - pmin) / (dmax - dmin)
    x = (digital.astype(np.float64) - dmin) * gain + pmin
    factor = _unit_factor(dim)
    return x * factor if factor != 1.0 else x


def _fmt(value, width=8):
    for prec in range(width, 0, -1):
        s = f"{value:.{prec}g}"
        if len(s) <= width:
            return s
    raise ArgumentError(f"cannot fit {value} into {width} characters")


def _field(text, width):
    text = str(text)
    if len(text) > width:
        text = text[:width]
    return text.ljust(width).encode("latin-1")


def _auto_header(x):
    peak = float(np.max(np.abs(x))) if x.size else 0.0
    peak = max(peak * 1.001, 1.0)
    text = _fmt(peak)
    while float(text) < peak:
        peak *= 1.0001
        text = _fmt(peak)
    return EdfSignalHeader(physical_dim="uV", physical_min="-" + text, physical_max=text,
                           digital_min="-32768", digital_max="32767")


def _record_duration(rates, duration):
    for d in (1, 2, 3, 4, 5, 6, 10, 15, 20, 30, 60):
        if all(abs(r * d - round(r * d)) < 1e-9 for r in rates) and abs(duration / d - round(duration / d)) < 1e-9:
            return float(d)
    raise ArgumentError("no EDF record duration fits all sampling rates and the total duration")


def write_edf(rec, patient="X", recording="X"):
    """Encode a :class:`Recording` as EDF bytes.

    Channels that carry their original :class:`EdfSignalHeader` are written
    with the same scaling, so ``parse_edf(write_edf(parse_edf(b)))`` yields
    identical samples.  Other channels get a symmetric µV range fitted to
    their peak amplitude.
    """
    rates = [c.rate for c in rec.channels]
    rec_s = _record_duration(rates, rec.duration)
    n_records = int(round(rec.duration / rec_s))
    headers = [c.edf if c.edf is not None else _auto_header(c.samples) for c in rec.channels]
    spr = [int(round(c.rate * rec_s)) for c in rec.channels]
    ns = len(rec.channels)

    digital = []
    for c, hdr, k in zip(rec.channels, headers, spr):
        pmin, pmax = float(hdr.physical_min), float(hdr.physical_max)
        dmin, dmax = int(hdr.digital_min), int(hdr.digital_max)
        gain = (pmax - pmin) / (dmax - dmin)
        x = c.samples[: n_records * k] / _unit_factor(hdr.physical_dim)
        d = np.clip(np.round((x - pmin) / gain + dmin), dmin, dmax).astype("<i2")
        if d.shape[0] < n_records * k:
            d = np.concatenate([d, np.full(n_records * k - d.shape[0], dmin, dtype="<i2")])
        digital.append(d.reshape(n_records, k))

    st = rec.start_time
    head = b"".join([
        _field("0", 8), _field(patient, 80), _field(recording, 80),
        _field(st.strftime("%d.%m.%y"), 8), _field(st.strftime("%H.%M.%S"), 8),
        _field(256 * (ns + 1), 8), _field("", 44), _field(n_records, 8),
        _field(_fmt(rec_s), 8), _field(ns, 4),
    ])
    per_signal = {
        "label": [c.label for c in rec.channels],
        "transducer": [h.transducer for h in headers],
        "physical_dim": [h.physical_dim for h in headers],
        "physical_min": [h.physical_min for h in headers],
        "physical_max": [h.physical_max for h in headers],
        "digital_min": [h.digital_min for h in headers],
        "digital_max": [h.digital_max for h in headers],
        "prefilter": [h.prefilter for h in headers],
        "n_samples": spr,
        "reserved": [""] * ns,
    }
    sig = b"".join(_field(v, width) for name, width in _SIGNAL_FIELDS for v in per_signal[name])
    body = np.concatenate(digital, axis=1).tobytes()
    return head + sig + body


def read_edf(path):
    with open(path, "rb") as fh:
        return parse_edf(fh.read())


# --- hypnograms ----------------------------------------------------------------

_RK_MAP = {
    "S0": "W", "W": "W", "WAKE": "W", "0": "W",
    "S1": "N1", "N1": "N1", "1": "N1",
    "S2": "N2", "N2": "N2", "2": "N2",
    "S3": "N3", "S4": "N3", "N3": "N3", "N4": "N3", "3": "N3", "4": "N3",
    "REM": "REM", "R": "REM", "5": "REM",
    "MT": UNSCORED, "UNSCORED": UNSCORED, "?": UNSCORED, "M": UNSCORED,
}


@dataclass
class Hypnogram:
    """Per-epoch stage sequence."""

    stages: tuple
    epoch_len: float = EPOCH_LEN
    unknown: int = field(default=0, compare=False)

    def __post_init__(self):
        self.stages = tuple(self.stages)
        if self.epoch_len != EPOCH_LEN:
            raise ArgumentError(f"epoch length must be {EPOCH_LEN} s")

    def __len__(self):
        return len(self.stages)

    def as_array(self):
        return np.array(self.stages, dtype=object)

    def mask(self, *stages):
        return np.isin(np.array(self.stages, dtype=object), stages)

    def aligned(self, n_epochs):
        """Truncate or pad with UNSCORED to ``n_epochs``."""
        st = self.stages[:n_epochs] + (UNSCORED,) * max(0, n_epochs - len(self.stages))
        return replace(self, stages=st)


def map_rk_to_aasm(h):
    """Relabel R&K stages (S0-S4) as AASM; unknown labels become UNSCORED."""
    labels = h.stages if isinstance(h, Hypnogram) else tuple(h)
    out = []
    unknown = 0
    for lab in labels:
        key = str(lab).strip().upper()
        mapped = _RK_MAP.get(key)
        if mapped is None:
            unknown += 1
            mapped = UNSCORED
        out.append(mapped)
    if unknown:
        log.warning("%d unknown stage label(s) mapped to %s", unknown, UNSCORED)
    return Hypnogram(tuple(out), unknown=unknown)


def parse_hypnogram(text):
    """Parse the ``epoch_index,stage`` sidecar format (R&K labels are mapped)."""
    labels = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            m = re.match(r"#\s*epoch_len\s*=\s*(\S+)", line)
            if m and float(m.group(1)) != EPOCH_LEN:
                raise ParseError(f"unsupported epoch length {m.group(1)}", lineno)
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2:
            raise ParseError(f"expected 'epoch_index,stage', got {line!r}", lineno)
        try:
            idx = int(parts[0])
        except ValueError:
            raise ParseError(f"bad epoch index {parts[0]!r}", lineno) from None
        if idx < 0 or idx in labels:
            raise ParseError(f"invalid or repeated epoch index {idx}", lineno)
        labels[idx] = parts[1]
    n = max(labels) + 1 if labels else 0
    return map_rk_to_aasm([labels.get(i, UNSCORED) for i in range(n)])


def format_hypnogram(h, source=None):
    lines = [f"# epoch_len={int(h.epoch_len)}"]
    if source:
        lines.append(f"# source={source}")
    lines += [f"{i},{s}" for i, s in enumerate(h.stages)]
    return "\n".join(lines) + "\n"


def read_hypnogram(path):
    with open(path, encoding="utf-8") as fh:
        return parse_hypnogram(fh.read())


def write_hypnogram(path, h, source=None):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_hypnogram(h, source))


# --- montage -------------------------------------------------------------------


@dataclass(frozen=True)
class MontagePrefs:
    """Ordered channel preferences (labels are matched after normalisation)."""

    eeg: tuple = ("C4-A1", "C3-A2", "C1-A1")
    eog_pair: tuple = ("ROC", "LOC")
    eog_derived: tuple = ("ROC-LOC", "EOG")
    emg: tuple = ("CHINEMG", "EMGCHIN", "CHIN", "SUBMENTAL", "CHIN1-CHIN2", "EMG")


@dataclass
class MontageTriplet:
    eeg: np.ndarray
    eog: np.ndarray
    emg: np.ndarray
    rate: float
    source_labels: tuple

    def __post_init__(self):
        if not (len(self.eeg) == len(self.eog) == len(self.emg)):
            raise ArgumentError("montage signals differ in length")


def normalize_label(label):
    """Upper-case, drop whitespace and a leading ``EEG``/``EOG`` type tag."""
    s = re.sub(r"\s+", "", str(label).upper())
    for prefix in ("EEG", "EOG"):
        if s.startswith(prefix) and len(s) > len(prefix) and s[len(prefix)] != "-":
            return s[len(prefix):]
    return s


def _index(rec):
    idx = {}
    for c in rec.channels:
        idx.setdefault(normalize_label(c.label), c)
    return idx


def _resolve_eeg(idx, prefs):
    for want in prefs.eeg:
        key = normalize_label(want)
        if key in idx:
            return idx[key], None, want
        if "-" in key:
            a, b = key.split("-", 1)
            if a in idx and b in idx:
                return idx[a], idx[b], want
    return None


def select_montage(rec, prefs=None, rate=TARGET_RATE):
    """Pick one EEG, one EOG (ROC - LOC) and the chin EMG, resampled to ``rate``.

    The choice depends only on channel labels.  Referential pairs (e.g. C4 and
    A1 recorded separately) are subtracted to form the derivation.
    """
    prefs = prefs or MontagePrefs()
    idx = _index(rec)
    missing = []

    eeg = _resolve_eeg(idx, prefs)
    if eeg is None:
        missing.append("EEG (" + "/".join(prefs.eeg) + ")")

    roc, loc = (normalize_label(x) for x in prefs.eog_pair)
    if roc in idx and loc in idx:
        eog = (idx[roc], idx[loc], f"{prefs.eog_pair[0]}-{prefs.eog_pair[1]}")
    else:
        eog = next(((idx[normalize_label(k)], None, k) for k in prefs.eog_derived
                    if normalize_label(k) in idx), None)
        if eog is None:
            missing.append("EOG (" + "/".join(prefs.eog_pair + prefs.eog_derived) + ")")

    emg = next((idx[normalize_label(k)] for k in prefs.emg if normalize_label(k) in idx), None)
    if emg is None:
        missing.append("EMG (" + "/".join(prefs.emg) + ")")

    if missing:
        what = ", ".join(m.split(" ")[0] for m in missing)
        raise MontageError(f"no {what} channel; looked for " + "; ".join(missing), missing)

    def derive(a, b):
        x = resample(a.samples, a.rate, rate)
        if b is None:
            return x
        y = resample(b.samples, b.rate, rate)
        n = min(len(x), len(y))
        return x[:n] - y[:n]

    sigs = [derive(eeg[0], eeg[1]), derive(eog[0], eog[1]), derive(emg, None)]
    n = min(len(s) for s in sigs)
    return MontageTriplet(
        eeg=sigs[0][:n], eog=sigs[1][:n], emg=sigs[2][:n], rate=float(rate),
        source_labels=(eeg[2], eog[2], emg.label),
    )


# --- resampling ----------------------------------------------------------------

TAPS_PER_PHASE = 64
KAISER_BETA = 8.6


def resample(x, rate, target_rate=TARGET_RATE):
    """Polyphase resampling with a Kaiser-windowed sinc (64 taps per phase)."""
    if not rate > 0 or not target_rate > 0:
        raise ArgumentError(f"sampling rates must be positive, got {rate} -> {target_rate}")
    x = np.asarray(x, dtype=np.float64)
    if rate == target_rate:
        return x.copy()
    frac = Fraction(target_rate / rate).limit_denominator(1000)
    up, down = frac.numerator, frac.denominator
    h = signal.firwin(TAPS_PER_PHASE * up + 1, 1.0 / max(up, down),
                      window=("kaiser", KAISER_BETA))
    # resample_poly applies the gain of `up` itself
    y = signal.resample_poly(x, up, down, window=h)
    return y[: int(round(x.shape[-1] * up / down))]
