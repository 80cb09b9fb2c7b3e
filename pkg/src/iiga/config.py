"""Flat `key = value` run configuration with [model] / [train] / [synth]
sections. Unknown sections or keys are errors so typos cannot silently fall
back to defaults; every CLI flag overrides its config key.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .attention import IIGAConfig
from .dataio import SynthConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Unknown key/section or a value that cannot be parsed."""


def _parse_range(text: str) -> tuple[int, int]:
    """Ranges are written lo..hi (inclusive)."""
    parts = text.split("..")
    if len(parts) != 2:
        raise ValueError(f"expected lo..hi, got {text!r}")
    return int(parts[0]), int(parts[1])


def _parse_int_list(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(v) for v in text.split(","))


_PARSERS = {
    int: int,
    float: float,
    str: str,
    tuple[int, int]: _parse_range,
    tuple[int, ...]: _parse_int_list,
}


@dataclass
class RunConfig:
    model: IIGAConfig = field(default_factory=IIGAConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)


_SECTIONS = {"model": IIGAConfig, "train": TrainConfig, "synth": SynthConfig}


def _field_types(cls) -> dict[str, type]:
    out = {}
    for f in fields(cls):
        hint = f.type
        if isinstance(hint, str):
            # dataclass field types arrive as strings under deferred annotations
            hint = {"int": int, "float": float, "str": str,
                    "tuple[int, int]": tuple[int, int],
                    "tuple[int, ...]": tuple[int, ...],
                    "Optional[int]": int}.get(hint, hint)
        out[f.name] = hint
    return out


def load_config(path) -> RunConfig:
    """Read a config file into the three config dataclasses."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    values: dict[str, dict] = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        cls = _SECTIONS[section]
        types = _field_types(cls)
        kwargs = {}
        for key, raw in parser.items(section):
            if key not in types:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            parse = _PARSERS.get(types[key])
            if parse is None:
                raise ConfigError(f"{path}: unsupported key {key!r} in [{section}]")
            try:
                kwargs[key] = parse(raw)
            except ValueError as exc:
                raise ConfigError(f"{path}: bad value for {section}.{key}: {exc}") from exc
        values[section] = kwargs
    try:
        return RunConfig(model=IIGAConfig(**values.get("model", {})),
                         train=TrainConfig(**values.get("train", {})),
                         synth=SynthConfig(**values.get("synth", {})))
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def apply_overrides(cfg: RunConfig, section: str, overrides: dict) -> None:
    """Replace config fields with CLI-provided values (None means not given)."""
    target = getattr(cfg, section)
    for key, value in overrides.items():
        if value is None:
            continue
        if not hasattr(target, key):
            raise ConfigError(f"no such {section} option: {key}")
        setattr(target, key, value)
    if hasattr(target, "__post_init__"):
        target.__post_init__()
