import json
import os

import pytest

from dnt_bench.config import ExperimentConfig, config_to_dict, load_config, parse_config
from twinpress.errors import ConfigurationError

DEFAULT_CONFIG = os.path.join(os.path.dirname(__file__), "..", "configs", "default.yaml")


def config_error(document):
    with pytest.raises(ConfigurationError) as err:
        parse_config(document)
    return err.value


def test_defaults_are_valid():
    config = load_config()
    assert config == ExperimentConfig()
    assert config.sync_config().seed == 42


def test_shipped_config_matches_the_defaults():
    assert load_config(DEFAULT_CONFIG) == ExperimentConfig()


def test_unknown_keys_name_their_dotted_path():
    assert config_error({"fedsync": {"rounds": 3, "bogus": 1}}).key == "fedsync.bogus"
    assert config_error({"extra": 1}).key == "extra"


def test_wrong_types_are_rejected():
    assert config_error({"forecaster": {"window": "12"}}).key == "forecaster.window"
    assert config_error({"network": {"rows": True}}).key == "network.rows"
    assert config_error({"clustering": {"enabled": "yes"}}).key == "clustering.enabled"
    assert config_error({"caching": {"overlaps": 3}}).key == "caching.overlaps"
    assert config_error({"network": 5}).key == "network"


def test_out_of_range_values_name_their_key():
    assert config_error({"clustering": {"k": 0}}).key == "clustering.k"
    assert config_error({"fedsync": {"rule": "krum"}}).key == "fedsync.rule"
    assert config_error({"fedsync": {"htwin_window": 12}}).key == "fedsync.htwin_window"
    assert config_error({"attack": {"kind": "sybil"}}).key == "attack.kind"
    assert config_error({"caching": {"theta": 1.0}}).key == "caching.theta"
    assert config_error({"network": {"csv_path": "/no/such/file.csv"}}).key == "network.csv_path"


def test_partial_sections_keep_their_defaults():
    config = parse_config({"traffic": {"amplitude": 0.2}, "fedsync": {"beta": 1, "max_events": None}})
    assert config.traffic.amplitude == 0.2
    assert config.traffic.base_load == 10.0
    assert config.traffic.hotspot_gain == 2.0
    assert config.fedsync.beta == 1.0
    assert isinstance(config.fedsync.beta, float)
    assert config.fedsync.max_events is None
    assert config.fedsync.rounds == 30


def test_derived_engine_configs():
    config = parse_config({"seed": 3, "forecaster": {"window": 6}, "attack": {"kind": "mpaf", "lam": 5.0}})
    sync = config.sync_config(batch_size=10)
    assert (sync.window, sync.batch_size, sync.seed) == (6, 10, 3)
    assert config.attack_config().kind == "mpaf"
    assert config.attack_config(kind="tpi").lam == 5.0


def test_overrides_are_validated(tmp_path):
    config = ExperimentConfig().with_overrides(seed=9, output_dir=str(tmp_path))
    assert (config.seed, config.output_dir) == (9, str(tmp_path))
    with pytest.raises(ConfigurationError) as err:
        ExperimentConfig().with_overrides(seed=-1)
    assert err.value.key == "seed"


def test_unreadable_or_malformed_files(tmp_path):
    with pytest.raises(ConfigurationError) as err:
        load_config(str(tmp_path / "missing.yaml"))
    assert err.value.key == "--config"
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: [1,\n", encoding="utf-8")
    with pytest.raises(ConfigurationError) as err:
        load_config(str(bad))
    assert err.value.key == "--config"


def test_empty_file_gives_the_defaults(tmp_path):
    empty = tmp_path / "empty.yaml"
    empty.write_text("", encoding="utf-8")
    assert load_config(str(empty)) == ExperimentConfig()


def test_config_dict_is_json_ready():
    document = config_to_dict(ExperimentConfig())
    assert document["caching"]["overlaps"] == [0, 8, 0, 0, 8]
    assert json.loads(json.dumps(document)) == document
    assert parse_config(document) == ExperimentConfig()
