"""Run configuration: one JSON document, validated before any work starts."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .diffusion import SampleConfig, TrainConfig, VpSchedule
from .metrics.suite import MetricOptions
from .model import ModelConfig
from .preprocess import PreprocessConfig


class ConfigError(ValueError):
    """Schema violation; the message names the offending key."""


SECTIONS = {
    "preprocess": PreprocessConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "sample": SampleConfig,
    "schedule": VpSchedule,
    "metrics": MetricOptions,
}
TOP_LEVEL = set(SECTIONS) | {"seed", "paths"}
PATH_KEYS = {"data", "out", "real", "gen", "fx", "ckpt"}


def _build(section: str, cls, values: Mapping[str, Any]):
    names = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in names:
            raise ConfigError(f"unknown key '{section}.{key}'")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{section}' section: {exc}") from None


@dataclass
class RunConfig:
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    schedule: VpSchedule = field(default_factory=VpSchedule)
    metrics: MetricOptions = field(default_factory=MetricOptions)
    paths: dict = field(default_factory=dict)
    seed: int = 0
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any], overrides: Mapping[str, Any] | None = None) -> "RunConfig":
        """Validate ``doc`` and apply dotted ``overrides`` (``"train.steps": 100``) on top.

        A top-level ``seed`` seeds train, sample and metrics unless they set their own.
        """
        if not isinstance(doc, Mapping):
            raise ConfigError("config root must be a JSON object")
        for key in doc:
            if key not in TOP_LEVEL:
                raise ConfigError(f"unknown key '{key}'")
        merged = {s: dict(doc.get(s) or {}) for s in SECTIONS}
        for s in SECTIONS:
            if not isinstance(doc.get(s, {}), Mapping):
                raise ConfigError(f"'{s}' must be a JSON object")
        paths = dict(doc.get("paths") or {})
        for key in paths:
            if key not in PATH_KEYS:
                raise ConfigError(f"unknown key 'paths.{key}'")
        seed = doc.get("seed", 0)
        for dotted, value in (overrides or {}).items():
            if value is None:
                continue
            if dotted == "seed":
                seed = value
                continue
            section, _, key = dotted.partition(".")
            if section == "paths":
                paths[key] = value
            elif section in merged:
                merged[section][key] = value
            else:
                raise ConfigError(f"unknown key '{dotted}'")
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigError("'seed' must be an integer")
        for s in ("train", "sample", "metrics"):
            merged[s].setdefault("seed", seed)
        built = {s: _build(s, c, merged[s]) for s, c in SECTIONS.items()}
        return cls(**built, paths=paths, seed=seed, raw=dict(doc))

    @classmethod
    def load(cls, path, overrides: Mapping[str, Any] | None = None) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(doc, overrides)

    def to_dict(self) -> dict:
        out = {s: dataclasses.asdict(getattr(self, s)) for s in SECTIONS}
        out["paths"] = dict(self.paths)
        out["seed"] = self.seed
        return out
