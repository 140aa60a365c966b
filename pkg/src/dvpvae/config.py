"""Flat ``key = value`` config files.

One setting per line, ``#`` starts a comment. Keys are the field names of
:class:`ModelConfig` and :class:`TrainConfig`; an unknown or repeated key is
an error. ``scales`` is written ``side:layers`` comma-separated, finest first
(``scales = 14:4, 7:4``); ``betas`` is ``0.9, 0.999``.
"""
from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import get_type_hints

from .model import ModelConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def _fields(cls) -> dict:
    hints = get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


MODEL_KEYS = _fields(ModelConfig)
TRAIN_KEYS = _fields(TrainConfig)


def _parse_bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _convert(key: str, raw: str, typ):
    if key == "scales":
        out = []
        for item in raw.split(","):
            side, n = item.strip().split(":")
            out.append((int(side), int(n)))
        return out
    if key == "betas":
        return tuple(float(v) for v in raw.split(","))
    if key == "snapshot_epochs":
        return tuple(int(v) for v in raw.split(",") if v.strip())
    if raw.lower() == "none" and "None" in str(typ):
        return None
    if typ is bool:
        return _parse_bool(raw)
    if typ is int or "int" in str(typ):
        return int(raw)
    if typ is float:
        return float(raw)
    return raw


def parse_config(text: str, source: str = "<config>") -> tuple[ModelConfig, TrainConfig]:
    model_kw, train_kw = {}, {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in MODEL_KEYS:
            target, typ = model_kw, MODEL_KEYS[key]
        elif key in TRAIN_KEYS:
            target, typ = train_kw, TRAIN_KEYS[key]
        else:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in target:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            target[key] = _convert(key, raw, typ)
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {e}") from None
    try:
        return ModelConfig(**model_kw), TrainConfig(**train_kw)
    except ValueError as e:
        raise ConfigError(f"{source}: {e}") from None


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def dump_config(model_cfg: ModelConfig, train_cfg: TrainConfig) -> str:
    lines = []
    for cfg in (model_cfg, train_cfg):
        for key, val in dataclasses.asdict(cfg).items():
            if key == "scales":
                val = ", ".join(f"{s}:{n}" for s, n in val)
            elif key == "betas":
                val = ", ".join(repr(float(b)) for b in val)
            elif key == "snapshot_epochs":
                val = ", ".join(str(e) for e in val)
            elif isinstance(val, bool):
                val = str(val).lower()
            lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"
