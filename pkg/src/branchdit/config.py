"""Plain-text ``key = value`` run configuration with flag overrides."""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .model import ModelConfig

CONFIG_ENV = "BRANCHDIT_CONFIG"

_MODEL_KEYS = {f.name: f.type for f in fields(ModelConfig)}


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _parse_list(text: str) -> list[str]:
    return [p.strip() for p in text.split(",") if p.strip()]


def _parse_ints(text: str) -> list[int]:
    try:
        return [int(p) for p in _parse_list(text)]
    except ValueError as exc:
        raise ConfigError(f"not a list of integers: {text!r}") from exc


@dataclass
class RunConfig:
    """Model hyperparameters, paths and command options for one CLI run."""

    model: dict = field(default_factory=dict)  # overrides onto ModelConfig
    checkpoint: str | None = None
    adapters: list[str] = field(default_factory=list)
    dataset: str | None = None
    out_dir: str = "out"
    task: str = "spatial"
    n: int = 64
    steps: int = 2000
    lr: float = 1e-3
    seed: int = 0
    T: int = 25
    precision: str = "f64"
    stage: str = "base"
    kind: str = "spatial"
    prompt: list[int] = field(default_factory=lambda: [0, 3])
    conditions: list[str] = field(default_factory=list)  # kind:path
    repeats: int = 5
    no_cache: bool = False
    no_mutual: bool = False

    _PARSERS = {
        "checkpoint": str, "dataset": str, "out_dir": str, "task": str, "stage": str, "kind": str,
        "precision": str, "adapters": _parse_list, "conditions": _parse_list, "prompt": _parse_ints,
        "n": int, "steps": int, "seed": int, "T": int, "repeats": int, "lr": float,
        "no_cache": _parse_bool, "no_mutual": _parse_bool,
    }

    @classmethod
    def keys(cls) -> list[str]:
        return sorted(list(cls._PARSERS) + list(_MODEL_KEYS))

    def set(self, key: str, value: str) -> None:
        key = key.strip().replace("-", "_")
        if key in _MODEL_KEYS:
            typ = _MODEL_KEYS[key]
            try:
                self.model[key] = float(value) if typ in (float, "float") else int(value)
            except ValueError as exc:
                raise ConfigError(f"{key}: bad value {value!r}") from exc
            return
        parser = self._PARSERS.get(key)
        if parser is None:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            setattr(self, key, parser(value.strip()))
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"{key}: bad value {value!r}") from exc

    def update(self, pairs: dict) -> "RunConfig":
        for k, v in pairs.items():
            self.set(k, str(v))
        return self

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            try:
                cfg.set(key, value)
            except ConfigError as exc:
                raise ConfigError(f"{source}:{lineno}: {exc}") from exc
        return cfg

    @classmethod
    def load(cls, path=None) -> "RunConfig":
        """Read ``path``, else the file named by ``$BRANCHDIT_CONFIG``, else defaults."""
        path = path or os.environ.get(CONFIG_ENV)
        if not path:
            return cls()
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        return cls.parse(p.read_text(), str(p))

    def model_config(self) -> ModelConfig:
        try:
            return replace(ModelConfig(), **self.model)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def check_paths(self, *, checkpoint=False, dataset=False, adapters=False, conditions=False) -> None:
        """Fail before any work if a required input is missing."""
        if checkpoint:
            if not self.checkpoint:
                raise ConfigError("a base checkpoint is required (checkpoint=...)")
            if not Path(self.checkpoint).is_file():
                raise ConfigError(f"checkpoint not found: {self.checkpoint}")
        if dataset:
            if not self.dataset:
                raise ConfigError("a dataset is required (dataset=...)")
            d = Path(self.dataset)
            if not (d.is_file() or (d / "manifest.txt").is_file()):
                raise ConfigError(f"dataset manifest not found: {self.dataset}")
        if adapters:
            for a in self.adapters:
                if not Path(a).is_file():
                    raise ConfigError(f"adapter not found: {a}")
        if conditions:
            for entry in self.conditions:
                kind, path = split_condition(entry)
                if not Path(path).is_file():
                    raise ConfigError(f"condition image not found: {path}")


def split_condition(entry: str) -> tuple[str, str]:
    if ":" not in entry:
        raise ConfigError(f"condition must be kind:path, got {entry!r}")
    kind, path = entry.split(":", 1)
    return kind, path
