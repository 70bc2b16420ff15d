"""Pipeline configuration: one YAML file with dotted-path overrides from the command line."""

from __future__ import annotations

import copy
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import yaml

from .bandscheme import SOURCES, load_scheme_file
from .datagen import DataConfig
from .energymeter import HardwareSpec
from .inference import InferenceConfig
from .model import ModelConfig
from .trainer import TrainConfig

DATA_ROOT_ENV = "BSRNN_DATA_ROOT"

TOP_LEVEL = ("data_root", "scheme_file", "output_dir", "seed", "label", "model", "train", "data", "inference", "hardware")

_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "inference": InferenceConfig,
    "hardware": HardwareSpec,
}


class ConfigError(ValueError):
    """Raised for malformed configuration files or overrides."""


def _field_names(cls) -> set[str]:
    names = {f.name for f in dataclasses.fields(cls)}
    if cls is ModelConfig:
        names.discard("scheme")
    if cls is DataConfig:
        names.discard("target")
    return names


def default_config() -> dict:
    return {
        "data_root": None,
        "scheme_file": None,
        "output_dir": "runs",
        "seed": 0,
        "label": "base",
        "model": {},
        "train": {},
        "data": {},
        "inference": {},
        "hardware": {},
    }


def validate_raw(raw: dict) -> None:
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping")
    unknown = set(raw) - set(TOP_LEVEL)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    for name, cls in _SECTIONS.items():
        section = raw.get(name) or {}
        if not isinstance(section, dict):
            raise ConfigError(f"section {name!r} must be a mapping")
        bad = set(section) - _field_names(cls)
        if bad:
            raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")


def apply_override(raw: dict, item: str) -> None:
    """Apply ``a.b=value`` in place; the value is parsed as YAML (``3``, ``true``, ``[1, 2]``)."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, value = item.split("=", 1)
    parts = key.strip().split(".")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override {key!r}: {p!r} is not a section")
    node[parts[-1]] = yaml.safe_load(value)


@dataclass
class PipelineConfig:
    raw: dict = field(default_factory=default_config)

    @classmethod
    def load(cls, path=None, overrides=()) -> "PipelineConfig":
        raw = default_config()
        if path is not None:
            loaded = yaml.safe_load(Path(path).read_text()) or {}
            if not isinstance(loaded, dict):
                raise ConfigError(f"{path}: configuration must be a mapping")
            for k, v in loaded.items():
                if k in _SECTIONS and isinstance(v, dict):
                    raw[k].update(v)
                else:
                    raw[k] = v
        for item in overrides:
            apply_override(raw, item)
        cfg = cls(raw)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        validate_raw(self.raw)
        # Building every section surfaces bad values at load time.
        self.model_config(self.available_sources()[0])
        self.train_config()
        self.data_config("vocals")
        self.inference_config()
        self.hardware()

    def available_sources(self) -> list[str]:
        """Sources the configured scheme file defines."""
        try:
            ranges = load_scheme_file(self.raw.get("scheme_file"))
        except (OSError, ValueError, jsonschema.ValidationError) as e:
            raise ConfigError(f"cannot read scheme file: {e}") from e
        found = [s for s in SOURCES if s in ranges]
        if not found:
            raise ConfigError("the scheme file defines none of " + ", ".join(SOURCES))
        return found

    def _build(self, cls, **extra):
        try:
            return cls(**copy.deepcopy(self.raw.get(cls_section(cls)) or {}), **extra)
        except (TypeError, ValueError, KeyError) as e:
            raise ConfigError(f"invalid {cls_section(cls)} section: {e}") from e

    @property
    def seed(self) -> int:
        return int(self.raw.get("seed") or 0)

    @property
    def label(self) -> str:
        return str(self.raw.get("label") or "base")

    @property
    def output_dir(self) -> Path:
        return Path(self.raw.get("output_dir") or "runs")

    @property
    def data_root(self) -> Path | None:
        root = self.raw.get("data_root") or os.environ.get(DATA_ROOT_ENV)
        return Path(root) if root else None

    def model_config(self, source: str) -> ModelConfig:
        section = copy.deepcopy(self.raw.get("model") or {})
        try:
            return ModelConfig.for_source(source, self.raw.get("scheme_file"), **section)
        except KeyError as e:
            raise ConfigError(str(e.args[0])) from e
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid model section: {e}") from e

    def train_config(self) -> TrainConfig:
        section = {"seed": self.seed, **(self.raw.get("train") or {})}
        try:
            return TrainConfig(**section)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid train section: {e}") from e

    def data_config(self, source: str) -> DataConfig:
        return self._build(DataConfig, target=source)

    def inference_config(self) -> InferenceConfig:
        return self._build(InferenceConfig)

    def hardware(self) -> HardwareSpec:
        return self._build(HardwareSpec)

    def resolved(self, source: str | None = None) -> dict:
        """The fully expanded configuration, as persisted next to every run."""
        out = copy.deepcopy(self.raw)
        out["data_root"] = str(self.data_root) if self.data_root else None
        out["train"] = self.train_config().to_dict()
        out["inference"] = self.inference_config().to_dict()
        out["hardware"] = dataclasses.asdict(self.hardware())
        if source is not None:
            out["source"] = source
            out["model"] = self.model_config(source).to_dict()
            out["data"] = self.data_config(source).to_dict()
        return out

    def dump(self, path, source: str | None = None) -> None:
        Path(path).write_text(yaml.safe_dump(_plain(self.resolved(source)), sort_keys=False))


def cls_section(cls) -> str:
    return next(k for k, v in _SECTIONS.items() if v is cls)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj
