"""Run configuration: an INI file with [model], [hnet], [train] and [data] sections.

Every key has a default, so a minimal file only names the method and the task
directory::

    [train]
    method = hnet

    [data]
    tasks = runs/synth/tasks
"""

from __future__ import annotations

import configparser
import io
import types
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .hypernet import HNetConfig
from .metatrain import TrainConfig
from .seq2seq import ModelConfig
from .taskdata import STRONG_CATEGORIES, ConfigurationError


@dataclass
class DataConfig:
    tasks: str = ""                 # directory of NIV2-style task JSON files
    splits: str = ""                # split manifest; computed from the fields below when empty
    english_only: bool = False
    strong_categories: tuple = STRONG_CATEGORIES
    weak_task_fraction: float = 0.10
    train_pool: str = "all"
    split_seed: int = 0
    eval_cap: int = 100


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    hnet: HNetConfig = field(default_factory=HNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def needs_hnet(self) -> bool:
        return self.train.method in ("hnet", "hnet_maml")


_SECTIONS = {"model": ModelConfig, "hnet": HNetConfig, "train": TrainConfig, "data": DataConfig}


def _convert(raw: str, annotation, key: str):
    origin = typing.get_origin(annotation)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        if raw.strip().lower() in ("", "none"):
            return None
        annotation = args[0]
    try:
        if annotation is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if annotation is int:
            return int(raw)
        if annotation is float:
            return float(raw)
        if annotation is tuple or typing.get_origin(annotation) is tuple:
            return tuple(p.strip() for p in raw.split(",") if p.strip())
        return raw.strip()
    except ValueError:
        raise ConfigurationError(f"{key}: cannot read {raw!r} as {getattr(annotation, '__name__', annotation)}")


def _hints(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def parse_config(text: str, base_dir: Path | None = None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigurationError(f"malformed config: {e}") from e
    unknown = set(cp.sections()) - set(_SECTIONS)
    if unknown:
        raise ConfigurationError(f"unknown config sections: {', '.join(sorted(unknown))}; "
                                 f"valid: {', '.join(_SECTIONS)}")
    built = {}
    for name, cls in _SECTIONS.items():
        hints = _hints(cls)
        values = {}
        if cp.has_section(name):
            for key, raw in cp.items(name):
                if key not in hints:
                    raise ConfigurationError(f"unknown key {name}.{key}; valid: {', '.join(hints)}")
                values[key] = _convert(raw, hints[key], f"{name}.{key}")
        try:
            built[name] = cls(**values)
        except ConfigurationError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigurationError(f"[{name}] {e}") from e
    data = built["data"]
    if base_dir is not None:
        for attr in ("tasks", "splits"):
            value = getattr(data, attr)
            if value and not Path(value).is_absolute():
                setattr(data, attr, str((base_dir / value).resolve()))
    return RunConfig(**built)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigurationError(f"cannot read config {path}: {e}") from e
    return parse_config(text, path.parent)


def dump_config(cfg: RunConfig) -> str:
    """Full snapshot with every default spelled out; parses back to an equal config."""
    cp = configparser.ConfigParser(interpolation=None)
    for name in _SECTIONS:
        section = getattr(cfg, name)
        cp[name] = {}
        for f in fields(section):
            value = getattr(section, f.name)
            if isinstance(value, tuple):
                value = ", ".join(value)
            cp[name][f.name] = "none" if value is None else str(value)
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
