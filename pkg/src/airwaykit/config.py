"""Strict YAML run configuration.

One file configures every stage; unknown keys anywhere are rejected so a
typo cannot silently fall back to a default. Section keys map one-to-one
onto the stage config dataclasses, so the schema is introspected rather
than maintained by hand. `config_hash` fingerprints the normalized mapping
(paths as written, not resolved) for run manifests.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from .augment import AugmentConfig
from .errors import ConfigError
from .fwhm import FWHMConfig
from .perceptual import PerceptualLossConfig
from .phantom import PhantomConfig
from .synth import PseudoRealConfig, SynthConfig
from .training import RefinerTrainConfig, RegressorTrainConfig
from .util import canonical_json, sha256_hex
from .volume import SeriesConfig

SCHEMA_VERSION = 1


@dataclass
class ExtractorSettings:
    variant: str = "hermetic"  # or "pretrained"
    hermetic_seed: int = 0

    def validate(self) -> None:
        if self.variant not in ("hermetic", "pretrained"):
            raise ConfigError(
                f"extractor.variant must be hermetic or pretrained, got {self.variant!r}")


@dataclass
class BiomarkerSettings:
    aggregation: str = "mean"
    min_generation: int = 2

    def validate(self) -> None:
        if self.aggregation not in ("mean", "median"):
            raise ConfigError(
                f"biomarkers.aggregation must be mean or median, got {self.aggregation!r}")
        if self.min_generation < 0:
            raise ConfigError("biomarkers.min_generation must be >= 0")


@dataclass
class CohortSettings:
    """Simulated smoke-cohort shape: phantom trees plus survival draws."""
    n_patients: int = 12
    severity_log_hazard: float = 2.0  # hazard multiplier exp(slope * severity)
    baseline_rate_per_day: float = 0.001
    censor_fraction: float = 0.2
    tree_generations: int = 3

    def validate(self) -> None:
        if self.n_patients < 2:
            raise ConfigError("cohort.n_patients must be >= 2")
        if not 0.0 <= self.censor_fraction < 1.0:
            raise ConfigError("cohort.censor_fraction must be in [0, 1)")
        if self.baseline_rate_per_day <= 0:
            raise ConfigError("cohort.baseline_rate_per_day must be > 0")
        if self.tree_generations < 2:
            raise ConfigError("cohort.tree_generations must be >= 2 so "
                              "biomarker-eligible segments exist")


_SECTION_TYPES = {
    "synth": SynthConfig,
    "pseudoreal": PseudoRealConfig,
    "augment": AugmentConfig,
    "loss": PerceptualLossConfig,
    "refiner": RefinerTrainConfig,
    "regressor": RegressorTrainConfig,
    "fwhm": FWHMConfig,
    "series": SeriesConfig,
    "phantom": PhantomConfig,
    "extractor": ExtractorSettings,
    "biomarkers": BiomarkerSettings,
    "cohort": CohortSettings,
}

_PATH_KEYS = ("vgg16_weights",)


@dataclass
class RunConfig:
    schema_version: int
    seed: int
    synth: SynthConfig
    pseudoreal: PseudoRealConfig
    augment: AugmentConfig
    loss: PerceptualLossConfig
    refiner: RefinerTrainConfig
    regressor: RegressorTrainConfig
    fwhm: FWHMConfig
    series: SeriesConfig
    phantom: PhantomConfig
    extractor: ExtractorSettings
    biomarkers: BiomarkerSettings
    cohort: CohortSettings
    paths: dict
    raw: dict

    def config_hash(self) -> str:
        return sha256_hex(canonical_json(self.raw).encode("utf-8"))


def _coerce_scalar(value, default, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported config field")


def _coerce(value, default, where: str):
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        elem = default[0]
        if isinstance(elem, str):
            return tuple(_coerce_scalar(v, elem, f"{where}[{i}]")
                         for i, v in enumerate(value))
        if len(value) != len(default):
            raise ConfigError(
                f"{where}: expected {len(default)} elements, got {len(value)}")
        return tuple(_coerce_scalar(v, d, f"{where}[{i}]")
                     for i, (v, d) in enumerate(zip(value, default)))
    return _coerce_scalar(value, default, where)


def _build_section(section_cls, mapping, section_name: str):
    defaults = section_cls()
    allowed = {f.name for f in fields(section_cls)}
    kwargs = {}
    for key, value in mapping.items():
        if key not in allowed:
            raise ConfigError(f"unknown config key {section_name}.{key}")
        kwargs[key] = _coerce(value, getattr(defaults, key), f"{section_name}.{key}")
    built = dataclasses.replace(defaults, **kwargs)
    if hasattr(built, "validate"):
        built.validate()
    return built


def parse_config(mapping, source: str = "<config>",
                 base_dir: Path | None = None) -> RunConfig:
    if mapping is None:
        mapping = {}
    if not isinstance(mapping, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    if "schema_version" not in mapping:
        raise ConfigError(f"{source}: missing required key schema_version")
    version = mapping["schema_version"]
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{source}: unsupported schema_version {version!r}, "
                          f"this build reads version {SCHEMA_VERSION}")
    known_top = {"schema_version", "seed", "paths", *_SECTION_TYPES}
    for key in mapping:
        if key not in known_top:
            raise ConfigError(f"unknown config key {key}")
    seed = mapping.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")

    sections = {}
    for name, cls in _SECTION_TYPES.items():
        raw_section = mapping.get(name, {})
        if not isinstance(raw_section, dict):
            raise ConfigError(f"config section {name} must be a mapping")
        sections[name] = _build_section(cls, raw_section, name)

    raw_paths = mapping.get("paths", {})
    if not isinstance(raw_paths, dict):
        raise ConfigError("config section paths must be a mapping")
    paths = {}
    for key, value in raw_paths.items():
        if key not in _PATH_KEYS:
            raise ConfigError(f"unknown config key paths.{key}")
        if not isinstance(value, str):
            raise ConfigError(f"paths.{key}: expected string, got {value!r}")
        resolved = Path(value)
        if base_dir is not None and not resolved.is_absolute():
            resolved = base_dir / resolved
        paths[key] = resolved.resolve()

    return RunConfig(schema_version=version, seed=seed, paths=paths,
                     raw=_normalize(mapping), **sections)


def _normalize(value):
    """YAML mapping → plain JSON-compatible structure for hashing."""
    if isinstance(value, dict):
        return {str(k): _normalize(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_normalize(v) for v in value]
    if isinstance(value, (bool, int, float, str)) or value is None:
        return value
    raise ConfigError(f"config value {value!r} is not a plain scalar")


def load_config(path=None) -> RunConfig:
    """Parse a YAML config file; None loads pure defaults."""
    if path is None:
        return parse_config({"schema_version": SCHEMA_VERSION}, "<defaults>")
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            mapping = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return parse_config(mapping, str(path), base_dir=path.parent)
