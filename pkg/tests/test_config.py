from pathlib import Path

import pytest
import yaml

from agriradar.config import (
    Config,
    config_from_dict,
    config_hash,
    config_to_dict,
    dump_config,
    load_config,
)
from agriradar.errors import ConfigError

DEFAULT_YAML = Path(__file__).parents[1] / "configs" / "default.yaml"


class TestLoad:
    def test_default_file_matches_defaults(self):
        assert load_config(DEFAULT_YAML) == Config()

    def test_none_gives_defaults(self):
        assert load_config(None) == Config()

    def test_partial_file_overrides(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("seed: 7\nschedule:\n  n_steps: 12\n")
        config = load_config(path)
        assert config.seed == 7
        assert config.schedule.n_steps == 12
        assert config.radar == Config().radar

    def test_empty_file_gives_defaults(self, tmp_path):
        path = tmp_path / "empty.yaml"
        path.write_text("")
        assert load_config(path) == Config()

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.yaml")

    def test_bad_yaml(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("seed: [1, 2\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_non_mapping(self, tmp_path):
        path = tmp_path / "list.yaml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigError):
            load_config(path)


class TestValidation:
    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="colour"):
            config_from_dict({"colour": "red"})

    def test_unknown_nested_key(self):
        with pytest.raises(ConfigError, match="radar.gain"):
            config_from_dict({"radar": {"gain": 3}})

    @pytest.mark.parametrize("values", [
        {"threads": 1.5},
        {"seed": "one"},
        {"scene": {"tree_count": True}},
        {"radar": {"dims": [1, 2]}},
        {"radar": {"dims": 5}},
        {"scene": 3},
    ])
    def test_type_errors(self, values):
        with pytest.raises(ConfigError):
            config_from_dict(values)

    def test_integer_accepted_for_float(self):
        assert config_from_dict({"schedule": {"sigma_max": 40}}).schedule.sigma_max == 40.0

    def test_zero_threads(self):
        with pytest.raises(ConfigError):
            config_from_dict({"threads": 0})


class TestSerialization:
    def test_dump_round_trip(self, small_config):
        back = config_from_dict(yaml.safe_load(dump_config(small_config)))
        assert back == small_config

    def test_dict_is_plain(self):
        values = config_to_dict(Config())
        assert isinstance(values["radar"]["dims"], list)

    def test_hash_is_stable(self):
        assert config_hash(Config()) == config_hash(Config())
        assert len(config_hash(Config())) == 64

    def test_hash_changes_with_seed(self):
        assert config_hash(Config(seed=1)) != config_hash(Config(seed=2))
