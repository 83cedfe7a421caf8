"""Run configuration: flat namespaced keys merged from a JSON file and flags."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .model import ModelConfig
from .scene import SceneConfig
from .train import TrainConfig


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class PathsConfig:
    data: str = ""            # dataset directory written by gen-data; empty = generate in memory
    checkpoint: str = ""
    out: str = "runs"

    def validate(self) -> None:
        pass


SECTIONS = {"scene": SceneConfig, "model": ModelConfig, "train": TrainConfig, "paths": PathsConfig}

# flag spellings that do not follow the section-key pattern
ALIASES = {"lambda": "train.lam", "lam": "train.lam", "lr": "train.lr", "seed": "train.seed",
           "epochs": "train.epochs", "batch-size": "train.batch_size"}


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> None:
        for section in SECTIONS:
            try:
                getattr(self, section).validate()
            except ValueError as e:
                msg = str(e)
                key = msg.split(" ", 1)[0] if msg.startswith(f"{section}.") else section
                raise ConfigError(key, msg) from None
        if self.model.channels != self.scene.channels:
            raise ConfigError("model.channels", f"must equal scene.channels ({self.scene.channels})")

    def flat(self) -> dict[str, Any]:
        return {f"{s}.{k}": v for s in SECTIONS for k, v in asdict(getattr(self, s)).items()}

    def to_json(self) -> str:
        return json.dumps(self.flat(), indent=2, sort_keys=True)


def known_keys() -> dict[str, tuple[type, Any]]:
    """Flat key -> (python type of the default, default value)."""
    out = {}
    for section, cls in SECTIONS.items():
        default = cls()
        for f in fields(cls):
            value = getattr(default, f.name)
            out[f"{section}.{f.name}"] = (type(value), value)
    return out


def _flatten(d: Mapping, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping) and prefix == "" and k in SECTIONS:
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def coerce(key: str, value: Any, kind: type) -> Any:
    """Check or convert ``value`` for a key whose default has type ``kind``.

    Strings (from the command line) are parsed; other values must already
    have the right JSON type.
    """
    if isinstance(value, str) and kind is not str:
        text = value.strip()
        if kind is bool:
            lowered = text.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ConfigError(key, f"expected a boolean, got {value!r}")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            raise ConfigError(key, f"cannot parse {value!r} as {kind.__name__}") from None
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected a boolean, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or float(value) != int(value):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return int(value)
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if kind is dict:
        if not isinstance(value, dict):
            raise ConfigError(key, f"expected an object, got {value!r}")
        return dict(value)
    if not isinstance(value, kind):
        raise ConfigError(key, f"expected {kind.__name__}, got {value!r}")
    return value


def apply_overrides(config: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    keys = known_keys()
    sections = {s: {} for s in SECTIONS}
    for key, value in overrides.items():
        if key not in keys:
            raise ConfigError(key, "unknown configuration key")
        section, name = key.split(".", 1)
        sections[section][name] = coerce(key, value, keys[key][0])
    return RunConfig(**{s: replace(getattr(config, s), **sections[s]) for s in SECTIONS})


def load_config_file(path) -> dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file {path} does not exist")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: expected a JSON object at top level")
    return _flatten(raw)


def parse_config(path=None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Defaults, then the file, then the flag overrides; validated."""
    config = RunConfig()
    if path:
        config = apply_overrides(config, load_config_file(path))
    if overrides:
        config = apply_overrides(config, overrides)
    config.validate()
    return config


def flag_to_key(flag: str) -> str:
    """``--train-lam`` / ``--scene-grid-h`` / ``--lambda`` -> flat key."""
    name = flag.lstrip("-")
    if name in ALIASES:
        return ALIASES[name]
    section, _, rest = name.partition("-")
    if section not in SECTIONS or not rest:
        raise ConfigError(flag, "unknown configuration flag")
    key = f"{section}.{rest.replace('-', '_')}"
    if key not in known_keys():
        raise ConfigError(key, "unknown configuration key")
    return key


def parse_flag_overrides(tokens: list[str]) -> dict[str, str]:
    """Turn leftover ``--key value`` / ``--key=value`` tokens into overrides."""
    out = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(tok, "expected a --section-key flag")
        if "=" in tok:
            flag, value = tok.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(tok, "missing value")
            flag, value = tok, tokens[i + 1]
            i += 2
        out[flag_to_key(flag)] = value
    return out
