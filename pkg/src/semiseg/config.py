"""Run configuration: INI-style sections of key=value, with overrides and snapshots."""

from __future__ import annotations

import configparser
import io
from dataclasses import asdict, dataclass, field, fields, replace

from .model import ModelConfig
from .oracle import OracleConfig
from .synthdata import SceneConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    count: int = 300
    eval_count: int = 100
    ratio: float = 0.1
    base_seed: int = 0
    eval_seed: int = 1_000_003
    split_seed: int = 0


@dataclass(frozen=True)
class RunMeta:
    name: str = "run"


SECTIONS = {
    "run": RunMeta,
    "data": DataConfig,
    "scene": SceneConfig,
    "model": ModelConfig,
    "oracle": OracleConfig,
    "train": TrainConfig,
}


@dataclass(frozen=True)
class RunConfig:
    run: RunMeta = field(default_factory=RunMeta)
    data: DataConfig = field(default_factory=DataConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def with_overrides(self, overrides) -> "RunConfig":
        """``overrides``: iterable of "section.key=value" strings."""
        updates: dict = {}
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form section.key=value")
            key, value = item.split("=", 1)
            if "." not in key:
                raise ConfigError(f"override key {key!r} needs a section prefix")
            section, name = key.strip().split(".", 1)
            updates.setdefault(section, {})[name] = value.strip()
        return _apply(self, updates)

    def snapshot(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for name in SECTIONS:
            parser[name] = {k: _render(v) for k, v in asdict(getattr(self, name)).items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def write_snapshot(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.snapshot())


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(value: str, typ: str, where: str):
    try:
        if typ in ("bool", bool):
            if isinstance(value, bool):
                return value
            low = str(value).strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ in ("int", int):
            return int(value)
        if typ in ("float", float):
            return float(value)
        return str(value)
    except ValueError:
        raise ConfigError(f"{where}: cannot read {value!r} as {typ}") from None


def _apply(cfg: RunConfig, updates: dict) -> RunConfig:
    new = {}
    for section, values in updates.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        cls = SECTIONS[section]
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for k, v in values.items():
            if k not in types:
                raise ConfigError(f"unknown key {section}.{k}")
            kw[k] = _coerce(v, types[k], f"{section}.{k}")
        try:
            new[section] = replace(getattr(cfg, section), **kw)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"[{section}]: {e}") from None
    out = replace(cfg, **new)
    try:
        out.scene.validate()
    except ValueError as e:
        raise ConfigError(f"[scene]: {e}") from None
    return out


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from None
    updates = {s: dict(parser[s]) for s in parser.sections()}
    return _apply(RunConfig(), updates)


def load_config(path=None, overrides=()) -> RunConfig:
    if path is None:
        cfg = RunConfig()
    else:
        try:
            with open(path) as f:
                text = f.read()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        cfg = parse_config(text)
    return cfg.with_overrides(overrides)
