"""INI-style configuration files.

Sections mirror the training dataclasses::

    [train]   TrainConfig scalars (epochs, batch_size, lr_max, ...)
    [noise]   NoiseSpec
    [tml]     TMLOptions
    [model]   EncoderConfig
    [paths]   data, out, log

Every key must name an existing field; values are typed from the field's
default. ``rff_sigmas`` is a comma-separated list.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .datastore import NoiseSpec
from .encoders import EncoderConfig
from .errors import ConfigError, InvalidInputError
from .trainer import TMLOptions, TrainConfig

PATH_KEYS = ("data", "out", "log")
_NESTED = {"noise": NoiseSpec, "tml": TMLOptions, "model": EncoderConfig}


@dataclass
class ConfigFile:
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: dict = field(default_factory=dict)


def _coerce(section: str, key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(v) for v in raw.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {type(default).__name__}", "config") from exc
    return raw


def _format(value) -> str:
    if isinstance(value, (tuple, list)):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _scalar_fields(cls, exclude=()) -> dict:
    inst = cls()
    return {f.name: getattr(inst, f.name) for f in fields(cls) if f.name not in exclude}


def parse_config(text: str, base: TrainConfig | None = None) -> ConfigFile:
    """Parse configuration text on top of ``base`` (defaults when omitted)."""
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed configuration: {exc.message}", "config") from exc
    base = base or TrainConfig()
    known = {"train", "paths", *_NESTED}
    for sec in cp.sections():
        if sec not in known:
            raise ConfigError(f"unknown section [{sec}]", "config")

    top = {}
    if cp.has_section("train"):
        defaults = _scalar_fields(TrainConfig, exclude=_NESTED)
        for key, raw in cp.items("train"):
            if key not in defaults:
                raise ConfigError(f"[train] unknown key {key!r}", "config")
            top[key] = _coerce("train", key, raw, defaults[key])
    nested = {}
    for sec, cls in _NESTED.items():
        current = getattr(base, sec)
        if not cp.has_section(sec):
            nested[sec] = current
            continue
        defaults = _scalar_fields(cls)
        vals = {}
        for key, raw in cp.items(sec):
            if key not in defaults:
                raise ConfigError(f"[{sec}] unknown key {key!r}", "config")
            vals[key] = _coerce(sec, key, raw, defaults[key])
        try:
            nested[sec] = replace(current, **vals)
        except InvalidInputError as exc:
            raise ConfigError(f"[{sec}] {exc.message}", "config") from exc
    paths = {}
    if cp.has_section("paths"):
        for key, raw in cp.items("paths"):
            if key not in PATH_KEYS:
                raise ConfigError(f"[paths] unknown key {key!r}", "config")
            paths[key] = raw.strip()
    try:
        train = replace(base, **top, **nested)
    except InvalidInputError as exc:
        raise ConfigError(f"[train] {exc.message}", "config") from exc
    return ConfigFile(train, paths)


def serialize_config(cf: ConfigFile) -> str:
    cfg = cf.train
    out = ["[train]"]
    for f in fields(TrainConfig):
        if f.name not in _NESTED:
            out.append(f"{f.name} = {_format(getattr(cfg, f.name))}")
    for sec in _NESTED:
        out.append("")
        out.append(f"[{sec}]")
        for k, v in asdict(getattr(cfg, sec)).items():
            out.append(f"{k} = {_format(v)}")
    if cf.paths:
        out.append("")
        out.append("[paths]")
        for k in PATH_KEYS:
            if k in cf.paths:
                out.append(f"{k} = {cf.paths[k]}")
    return "\n".join(out) + "\n"


def load_config(path, base: TrainConfig | None = None) -> ConfigFile:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}", "config") from exc
    return parse_config(text, base)
