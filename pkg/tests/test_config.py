import pytest

from airwaykit.config import (SCHEMA_VERSION, load_config, parse_config)
from airwaykit.errors import ConfigError


def base_mapping(**extra):
    mapping = {"schema_version": SCHEMA_VERSION}
    mapping.update(extra)
    return mapping


class TestSchema:
    def test_defaults_load(self):
        config = load_config(None)
        assert config.schema_version == SCHEMA_VERSION
        assert config.seed == 0
        assert config.synth.patch_size_px == 80
        assert config.regressor.epochs > 0

    def test_missing_schema_version(self):
        with pytest.raises(ConfigError, match="schema_version"):
            parse_config({"seed": 1})

    def test_wrong_schema_version(self):
        with pytest.raises(ConfigError, match="schema_version"):
            parse_config({"schema_version": 99})

    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            parse_config(base_mapping(sneaky=1))

    def test_unknown_section_key(self):
        with pytest.raises(ConfigError, match="regressor.epoch"):
            parse_config(base_mapping(regressor={"epoch": 5}))

    def test_unknown_paths_key(self):
        with pytest.raises(ConfigError, match="paths.weights"):
            parse_config(base_mapping(paths={"weights": "/tmp/w.pt"}))

    def test_non_mapping_section(self):
        with pytest.raises(ConfigError):
            parse_config(base_mapping(synth=[1, 2]))

    def test_non_mapping_top_level(self):
        with pytest.raises(ConfigError):
            parse_config([1, 2])

    def test_empty_mapping_needs_version(self):
        with pytest.raises(ConfigError):
            parse_config({})


class TestCoercion:
    def test_int_passes_as_float(self):
        config = parse_config(base_mapping(
            regressor={"learning_rate": 1}))
        assert config.regressor.learning_rate == 1.0
        assert isinstance(config.regressor.learning_rate, float)

    def test_float_rejected_for_int(self):
        with pytest.raises(ConfigError, match="expected integer"):
            parse_config(base_mapping(regressor={"epochs": 2.5}))

    def test_bool_rejected_for_int(self):
        with pytest.raises(ConfigError, match="expected integer"):
            parse_config(base_mapping(regressor={"epochs": True}))

    def test_string_rejected_for_number(self):
        with pytest.raises(ConfigError, match="expected number"):
            parse_config(base_mapping(regressor={"learning_rate": "fast"}))

    def test_fixed_length_tuple(self):
        config = parse_config(base_mapping(
            augment={"blur_sigma_range": [0.6, 0.8]}))
        assert config.augment.blur_sigma_range == (0.6, 0.8)

    def test_wrong_tuple_length(self):
        with pytest.raises(ConfigError, match="expected 2 elements"):
            parse_config(base_mapping(
                augment={"blur_sigma_range": [0.6, 0.7, 0.8]}))

    def test_string_tuple_any_length(self):
        config = parse_config(base_mapping(
            loss={"style_layers": ["relu1_2"]}))
        assert config.loss.style_layers == ("relu1_2",)

    def test_negative_seed_rejected(self):
        with pytest.raises(ConfigError, match="seed"):
            parse_config(base_mapping(seed=-1))

    def test_section_validation_runs(self):
        with pytest.raises(ConfigError):
            parse_config(base_mapping(biomarkers={"aggregation": "p95"}))
        with pytest.raises(ConfigError):
            parse_config(base_mapping(extractor={"variant": "vgg19"}))


class TestPaths:
    def test_relative_path_resolved_against_config_dir(self, tmp_path):
        sub = tmp_path / "cfgs"
        sub.mkdir()
        path = sub / "run.yaml"
        path.write_text("schema_version: 1\npaths:\n"
                        "  vgg16_weights: ../weights.pt\n")
        config = load_config(path)
        assert config.paths["vgg16_weights"] == \
            (tmp_path / "weights.pt").resolve()

    def test_absolute_path_kept(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("schema_version: 1\npaths:\n"
                        "  vgg16_weights: /opt/w.pt\n")
        config = load_config(path)
        assert str(config.paths["vgg16_weights"]) == "/opt/w.pt"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "absent.yaml")

    def test_invalid_yaml(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("schema_version: [unclosed\n")
        with pytest.raises(ConfigError, match="YAML"):
            load_config(path)


class TestHash:
    def test_stable_across_parses(self):
        mapping = base_mapping(seed=3, regressor={"epochs": 7})
        a = parse_config(mapping).config_hash()
        b = parse_config(base_mapping(seed=3, regressor={"epochs": 7}))
        assert a == b.config_hash()
        assert len(a) == 64

    def test_sensitive_to_values(self):
        a = parse_config(base_mapping(seed=3)).config_hash()
        b = parse_config(base_mapping(seed=4)).config_hash()
        assert a != b

    def test_file_and_mapping_agree(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("schema_version: 1\nseed: 5\n")
        assert load_config(path).config_hash() == \
            parse_config(base_mapping(seed=5)).config_hash()
