"""INI-style run configuration with ``[model]`` and ``[train]`` sections.

Example::

    [model]
    c = 16
    n_blocks = 2
    enh_blocks_per_level = 1, 1, 1, 1

    [train]
    total_steps = 300
    seed = 42
    hsv = true
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from pathlib import Path

from .checkpoint import atomic_write
from .errors import ConfigError
from .models import ModelConfig
from .training import TrainConfig


def _coerce(cls, section: configparser.SectionProxy, name: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    out = {}
    for key in section:
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in [{name}]")
        default = getattr(cls(), key)
        raw = section[key]
        try:
            if isinstance(default, bool):
                value = section.getboolean(key)
            elif isinstance(default, int):
                value = int(raw)
            elif isinstance(default, float):
                value = float(raw)
            elif isinstance(default, tuple):
                value = tuple(int(v) for v in raw.replace(",", " ").split())
            else:
                value = raw
        except ValueError:
            raise ConfigError(f"bad value for {name}.{key}: {raw!r}") from None
        out[key] = value
    return out


def load_config(path: str | os.PathLike | None) -> tuple[ModelConfig, TrainConfig]:
    if path is None:
        return ModelConfig(), TrainConfig()
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None
    extra = set(parser.sections()) - {"model", "train"}
    if extra:
        raise ConfigError(f"unknown section(s): {sorted(extra)}")
    model = _coerce(ModelConfig, parser["model"], "model") if parser.has_section("model") else {}
    train = _coerce(TrainConfig, parser["train"], "train") if parser.has_section("train") else {}
    return ModelConfig(**model), TrainConfig(**train)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def dump_config(model: ModelConfig, train: TrainConfig) -> str:
    lines = []
    for name, cfg in (("model", model), ("train", train)):
        lines.append(f"[{name}]")
        for f in dataclasses.fields(cfg):
            lines.append(f"{f.name} = {_format(getattr(cfg, f.name))}")
        lines.append("")
    return "\n".join(lines)


def save_config(model: ModelConfig, train: TrainConfig, path: str | os.PathLike) -> None:
    atomic_write(Path(path), dump_config(model, train).encode("utf-8"))
