import pytest

from psgrbd import config
from psgrbd.errors import ConfigError


def test_defaults_round_trip_through_text():
    cfg = config.defaults()
    again = config.parse_config(cfg.to_text())
    assert again.values == cfg.values
    assert cfg["folds"] == 10 and cfg["staging.n_trees"] == 500 and cfg["staging.m_try"] is None


def test_parse_overrides_and_typed_values():
    cfg = config.parse_config("""
        # comment
        seed=7
        filter.emg.notch_hz=50
        metrics.atonia.corrected=no   # trailing comment
        montage.eeg=C3-A2, C4-A1
        staging.m_try=4
    """)
    assert cfg["seed"] == 7
    assert cfg["filter.emg.notch_hz"] == (50.0,)
    assert cfg["metrics.atonia.corrected"] is False
    assert cfg.montage.eeg == ("C3-A2", "C4-A1")
    assert cfg["staging.m_try"] == 4
    assert cfg.metric_params.atonia_corrected is False
    assert cfg.preprocessing["emg_notches"] == (50.0,)


@pytest.mark.parametrize("text", [
    "nonsense=1",
    "seed",
    "seed=abc",
    "folds=1",
    "filter.order=501",
    "filter.eeg.band_hz=40,0.3",
    "metrics.stream.percentile=150",
    "features.epoch_s=20",
    "features.mini_epoch_s=7",
    "metrics.atonia.corrected=maybe",
    "montage.eog_pair=ROC",
])
def test_invalid_configs_raise_config_error(text):
    with pytest.raises(ConfigError):
        config.parse_config(text)


def test_with_overrides_and_missing_file(tmp_path):
    cfg = config.defaults().with_overrides(seed=3, detector__n_trees=50)
    assert cfg["seed"] == 3 and cfg["detector.n_trees"] == 50
    with pytest.raises(ConfigError):
        config.defaults().with_overrides(bogus=1)
    with pytest.raises(ConfigError):
        config.load_config(tmp_path / "absent.cfg")
    path = tmp_path / "run.cfg"
    path.write_text("folds=3\n")
    assert config.load_config(path)["folds"] == 3
