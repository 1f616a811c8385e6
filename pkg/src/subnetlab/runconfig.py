"""Flat ``section.key = value`` run configuration.

Sections map onto the library's config dataclasses; a handful of extra keys
describe seed lists, sparsity levels and which artifacts a stage consumes.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .analysis import FaithfulnessQuery
from .model import ModelConfig
from .persist import format_config, parse_config_text
from .pruner import PruneConfig
from .taskgen import TaskSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Unknown key or unparseable value; maps to a usage error at the CLI."""


DEFAULT_SEEDS = tuple(range(42, 54))

SECTIONS: dict[str, type] = {
    "task": TaskSpec,
    "model": ModelConfig,
    "train": TrainConfig,
    "prune": PruneConfig,
    "analysis": FaithfulnessQuery,
}

# Keys that do not belong to a library dataclass.
EXTRA_KEYS: dict[str, tuple[Any, Any]] = {
    "run.seed": (int | None, None),
    "run.seeds": (tuple[int, ...], DEFAULT_SEEDS),
    "prune.sparsities": (tuple[float, ...], (0.5, 0.7)),
    "prune.checkpoint": (int | None, None),
    "prune.jobs": (int, 1),
    "analysis.checkpoints": (tuple[int, ...], ()),
    "analysis.ablate": (tuple[str, ...], ()),
    "analysis.attention_examples": (int, 2000),
    "analysis.means_examples": (int, 4000),
}

# Fields derived from other sections unless set explicitly.
DERIVED = {"model.vocab_size", "model.max_positions", "prune.target_sparsity", "prune.seed"}


def _parse_scalar(tp, text: str):
    if tp is bool:
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    return tp(text)


def parse_value(tp, text: str):
    """Parse ``text`` according to a (resolved) type annotation."""
    text = text.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if type(None) in args and text.lower() in ("none", "null", ""):
            return None
        inner = [a for a in args if a is not type(None)]
        return parse_value(inner[0], text)
    if origin is tuple:
        inner = args[0]
        if not text:
            return ()
        return tuple(_parse_scalar(inner, part.strip()) for part in text.split(","))
    return _parse_scalar(tp, text)


def _field_types(cls) -> dict[str, Any]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def known_keys() -> dict[str, Any]:
    keys = {f"{sec}.{name}": tp for sec, cls in SECTIONS.items()
            for name, tp in _field_types(cls).items()}
    keys.update({k: tp for k, (tp, _) in EXTRA_KEYS.items()})
    return keys


@dataclass
class RunConfig:
    values: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, raw: Mapping[str, str]) -> "RunConfig":
        keys = known_keys()
        values: dict[str, Any] = {}
        for key, text in raw.items():
            if key not in keys:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                values[key] = parse_value(keys[key], str(text))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from None
        cfg = cls(values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path, overrides: Mapping[str, str] | None = None) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(str(path))
        raw = parse_config_text(path.read_text(), str(path))
        raw.update(overrides or {})
        return cls.from_mapping(raw)

    def get(self, key: str):
        if key in self.values:
            return self.values[key]
        if key in EXTRA_KEYS:
            return EXTRA_KEYS[key][1]
        sec, name = key.split(".", 1)
        for f in dataclasses.fields(SECTIONS[sec]):
            if f.name == name:
                if f.default is not dataclasses.MISSING:
                    return f.default
                return f.default_factory()  # type: ignore[misc]
        raise KeyError(key)

    def section(self, name: str) -> dict[str, Any]:
        fields = {f.name for f in dataclasses.fields(SECTIONS[name])}
        return {k.split(".", 1)[1]: v for k, v in self.values.items()
                if k.startswith(name + ".") and k.split(".", 1)[1] in fields}

    def validate(self) -> None:
        try:
            self.task_spec()
            self.train_config()
            self.query()
            for s in self.get("prune.sparsities"):
                self.prune_config(s, 0)
            self.model_config(self.task_spec().vocabulary())
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    # builders -------------------------------------------------------------

    def task_spec(self) -> TaskSpec:
        kw = self.section("task")
        if "seed" not in kw and self.get("run.seed") is not None:
            kw["seed"] = self.get("run.seed")
        return TaskSpec(**kw)

    def model_config(self, vocab) -> ModelConfig:
        kw = self.section("model")
        kw.setdefault("vocab_size", len(vocab))
        kw.setdefault("max_positions", self.task_spec().max_length())
        return ModelConfig(**kw)

    def train_config(self) -> TrainConfig:
        kw = self.section("train")
        if "seed" not in kw and self.get("run.seed") is not None:
            kw["seed"] = self.get("run.seed")
        return TrainConfig(**kw)

    def prune_config(self, sparsity: float, seed: int) -> PruneConfig:
        kw = self.section("prune")
        kw["target_sparsity"] = sparsity
        kw["seed"] = seed
        return PruneConfig(**kw)

    def query(self) -> FaithfulnessQuery:
        return FaithfulnessQuery(**self.section("analysis"))

    def resolved(self) -> dict[str, Any]:
        """Every known key with its effective value (for writing next to outputs)."""
        out = {}
        for key in known_keys():
            if key in DERIVED and key not in self.values:
                continue
            out[key] = self.get(key)
        return out

    def text(self) -> str:
        return format_config(self.resolved())


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    values = dict(cfg.values)
    values.update({k.replace("__", "."): v for k, v in kw.items()})
    out = RunConfig(values)
    out.validate()
    return out
