"""Flat ``key=value`` run configuration with dotted section prefixes.

Example::

    # comments start with '#'
    seed=7
    filter.emg.notch_hz=50,60
    metrics.motor.threshold=2.0

Unknown keys and unparsable values raise :class:`ConfigError`.
"""

from dataclasses import dataclass

from .dsp import EpochGrid
from .errors import ConfigError
from .psg_io import MontagePrefs
from .rbd import MetricParams


def _floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _labels(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text):
    return None if text.strip().lower() in ("", "auto") else int(text)


# key -> (parser, default)
SCHEMA = {
    "seed": (int, 0),
    "folds": (int, 10),
    "jobs": (int, 1),
    "dataset.manifest": (str, ""),
    "montage.eeg": (_labels, MontagePrefs.eeg),
    "montage.eog_pair": (_labels, MontagePrefs.eog_pair),
    "montage.eog_derived": (_labels, MontagePrefs.eog_derived),
    "montage.emg": (_labels, MontagePrefs.emg),
    "filter.order": (int, 500),
    "filter.eeg.band_hz": (_floats, (0.3, 40.0)),
    "filter.emg.notch_hz": (_floats, (50.0, 60.0)),
    "filter.emg.band_hz": (_floats, (10.0, 100.0)),
    "features.epoch_s": (float, 30.0),
    "features.mini_epoch_s": (float, 10.0),
    "staging.n_trees": (int, 500),
    "staging.m_try": (_opt_int, None),
    "detector.n_trees": (int, 500),
    "detector.importance_repeats": (int, 10),
    "metrics.atonia.span_s": (float, MetricParams.atonia_span_s),
    "metrics.atonia.corrected": (_bool, MetricParams.atonia_corrected),
    "metrics.stream.percentile": (float, MetricParams.stream_percentile),
    "metrics.motor.threshold": (float, MetricParams.motor_threshold),
    "metrics.motor.min_duration_s": (float, MetricParams.motor_min_duration_s),
    "metrics.motor.inter_event_s": (float, MetricParams.motor_inter_event_s),
    "metrics.motor.baseline_window_s": (float, MetricParams.motor_baseline_window_s),
    "metrics.ratio_eps": (float, MetricParams.ratio_eps),
    "synth.n_hc": (int, 20),
    "synth.n_rbd": (int, 20),
    "synth.hours": (float, 4.0),
    "synth.rate": (float, 200.0),
}


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def with_overrides(self, **kv):
        """Copy with ``a__b__c=value`` style overrides (already typed)."""
        vals = dict(self.values)
        for k, v in kv.items():
            key = k.replace("__", ".")
            if key not in SCHEMA:
                raise ConfigError(f"unknown configuration key {key!r}")
            vals[key] = v
        return validate(RunConfig(vals))

    @property
    def montage(self):
        return MontagePrefs(eeg=self["montage.eeg"], eog_pair=self["montage.eog_pair"],
                            eog_derived=self["montage.eog_derived"], emg=self["montage.emg"])

    @property
    def grid(self):
        return EpochGrid(epoch_len=self["features.epoch_s"], mini_len=self["features.mini_epoch_s"])

    @property
    def metric_params(self):
        return MetricParams(
            atonia_span_s=self["metrics.atonia.span_s"],
            atonia_corrected=self["metrics.atonia.corrected"],
            stream_percentile=self["metrics.stream.percentile"],
            motor_threshold=self["metrics.motor.threshold"],
            motor_min_duration_s=self["metrics.motor.min_duration_s"],
            motor_inter_event_s=self["metrics.motor.inter_event_s"],
            motor_baseline_window_s=self["metrics.motor.baseline_window_s"],
            ratio_eps=self["metrics.ratio_eps"])

    @property
    def preprocessing(self):
        return dict(eeg_band=self["filter.eeg.band_hz"], emg_notches=self["filter.emg.notch_hz"],
                    emg_band=self["filter.emg.band_hz"], order=self["filter.order"])

    def to_text(self):
        lines = []
        for key in sorted(self.values):
            v = self.values[key]
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif v is None:
                v = "auto"
            lines.append(f"{key}={v}")
        return "\n".join(lines) + "\n"


def defaults():
    return RunConfig({k: d for k, (_, d) in SCHEMA.items()})


def parse_config(text, base=None):
    vals = dict((base or defaults()).values)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown configuration key {key!r}")
        try:
            vals[key] = SCHEMA[key][0](value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    return validate(RunConfig(vals))


def load_config(path, base=None):
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read(), base)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def validate(cfg):
    v = cfg.values
    for key in ("folds", "jobs", "staging.n_trees", "detector.n_trees", "detector.importance_repeats",
                "filter.order", "synth.n_hc", "synth.n_rbd"):
        if v[key] < (2 if key == "folds" else 1 if not key.startswith("synth") else 0):
            raise ConfigError(f"{key} is out of range: {v[key]}")
    if v["filter.order"] % 2:
        raise ConfigError("filter.order must be even")
    for key in ("filter.eeg.band_hz", "filter.emg.band_hz"):
        if len(v[key]) != 2 or not 0 < v[key][0] < v[key][1]:
            raise ConfigError(f"{key} needs two increasing positive edges")
    if not v["montage.eeg"] or len(v["montage.eog_pair"]) != 2 or not v["montage.emg"]:
        raise ConfigError("montage preferences are incomplete")
    if not 0 < v["metrics.stream.percentile"] <= 100:
        raise ConfigError("metrics.stream.percentile must lie in (0, 100]")
    for key in ("metrics.atonia.span_s", "metrics.motor.threshold", "metrics.motor.baseline_window_s",
                "synth.hours", "synth.rate"):
        if not v[key] > 0:
            raise ConfigError(f"{key} must be positive")
    if v["features.epoch_s"] != 30.0:
        raise ConfigError("features.epoch_s is fixed at 30")
    try:
        cfg.grid
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg
