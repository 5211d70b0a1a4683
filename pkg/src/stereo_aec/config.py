"""Experiment configuration: one nested YAML document, unknown keys rejected.

Sections and their defaults::

    dataset:     DatasetConfig fields, plus far_dir / near_dir corpus folders
                 and the synthetic fallback sources
    model:       LcsmConfig fields, plus the init seed
    stft:        StftConfig fields
    training:    TrainConfig fields
    evaluation:  conditions, workers, csv, png

The fully resolved document is written into every output directory.
"""
from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .dataset import DatasetConfig
from .dsp import StftConfig
from .model import LcsmConfig
from .training import TrainConfig

CONFIG_FILENAME = "config.yaml"


class ConfigError(ValueError):
    pass


@dataclass
class CorpusConfig:
    far_dir: str | None = None
    near_dir: str | None = None
    far_synthetic: str = "speech"     # fallback generator when a directory is absent
    near_synthetic: str = "speech"


@dataclass
class ModelSection:
    variant: str = "dcsm"
    conv_channels: int = 64
    n_conv: int = 6
    kernel: int = 5
    lstm_hidden: int = 128
    n_lstm: int = 2
    seed: int = 0

    def lcsm(self) -> LcsmConfig:
        return LcsmConfig(self.variant, self.conv_channels, self.n_conv, self.kernel,
                          self.lstm_hidden, self.n_lstm)


@dataclass
class EvaluationConfig:
    conditions: list | None = None
    workers: int = 1
    csv: bool = True
    png: bool = False


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelSection = field(default_factory=ModelSection)
    stft: StftConfig = field(default_factory=StftConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def write(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / CONFIG_FILENAME
        path.write_text(self.dump())
        return path

    @classmethod
    def from_dict(cls, doc: dict | None) -> "ExperimentConfig":
        doc = doc or {}
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a mapping")
        sections = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(doc) - set(sections)
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        kwargs = {}
        for name, f in sections.items():
            section_cls = f.default_factory
            kwargs[name] = _build(section_cls, doc.get(name) or {}, name)
        return cls(**kwargs)

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "ExperimentConfig":
        doc = {}
        if path is not None:
            try:
                doc = yaml.safe_load(Path(path).read_text()) or {}
            except yaml.YAMLError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        for dotted, value in (overrides or {}).items():
            section, key = dotted.split(".", 1)
            doc.setdefault(section, {})[key] = value
        return cls.from_dict(doc)


def _build(section_cls, values: dict, section: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(section_cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {sorted(unknown)}")
    try:
        return section_cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section!r} section: {exc}") from exc


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if hasattr(x, "item") and not isinstance(x, (str, bytes)):
        return x.item()
    return x
