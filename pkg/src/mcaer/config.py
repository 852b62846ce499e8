"""INI run configuration: ``[model]``, ``[train]`` and ``[prep]`` sections.

Keys are the field names of :class:`StreamConfig`, :class:`TrainConfig` and
:class:`PrepConfig`. Values are typed from the field annotations; tuples are
comma separated and optional values accept ``none``. Unknown sections or keys
are rejected. Example::

    [model]
    width_divisor = 8
    enabled_streams = face,context,body

    [train]
    epochs = 200
    seed = 0
    early_stop_acc = none
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field, replace
from typing import Any, Optional

from .errors import ConfigError
from .model import StreamConfig
from .preprocessing import PrepConfig
from .training import TrainConfig

SECTIONS = {"model": StreamConfig, "train": TrainConfig, "prep": PrepConfig}


@dataclass(frozen=True)
class RunConfig:
    model: StreamConfig = field(default_factory=StreamConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    prep: PrepConfig = field(default_factory=PrepConfig)

    def with_streams(self, streams) -> "RunConfig":
        streams = tuple(streams)
        return RunConfig(self.model.with_streams(streams), replace(self.train, enabled_streams=streams), self.prep)

    def to_ini(self) -> str:
        lines = []
        for section in SECTIONS:
            lines.append(f"[{section}]")
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                lines.append(f"{f.name} = {format_value(getattr(obj, f.name))}")
            lines.append("")
        return "\n".join(lines)


def format_value(v: Any) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    return str(v)


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _scalar_parser(type_name: str):
    return {"int": int, "float": float, "bool": _parse_bool, "str": lambda s: s.strip()}[type_name]


def parse_value(annotation: str, text: str) -> Any:
    """Parse ``text`` according to a field annotation string such as ``tuple[int, ...]``."""
    ann = annotation.replace(" ", "")
    if ann.startswith("Optional[") and ann.endswith("]"):
        if text.strip().lower() in ("none", ""):
            return None
        return parse_value(ann[len("Optional[") : -1], text)
    if ann.startswith("tuple["):
        inner = ann[len("tuple[") : -1].split(",")
        items = [t.strip() for t in text.split(",") if t.strip()]
        if inner[-1] == "...":
            return tuple(_scalar_parser(inner[0])(t) for t in items)
        if len(items) != len(inner):
            raise ValueError(f"expected {len(inner)} comma-separated values, got {len(items)}")
        return tuple(_scalar_parser(k)(t) for k, t in zip(inner, items))
    return _scalar_parser(ann)(text)


def _typed_updates(cls, values: dict[str, str], where: str) -> dict[str, Any]:
    known = {f.name: f for f in dataclasses.fields(cls)}
    out = {}
    for key, text in values.items():
        if key not in known:
            raise ConfigError(f"{where}: unknown key {key!r}; allowed: {sorted(known)}")
        try:
            out[key] = parse_value(str(known[key].type), text)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None
    return out


def apply_updates(config: RunConfig, section: str, values: dict[str, str], where: str = "override") -> RunConfig:
    if section not in SECTIONS:
        raise ConfigError(f"unknown section [{section}]; allowed: {sorted(SECTIONS)}")
    updates = _typed_updates(SECTIONS[section], values, f"{where} [{section}]")
    return replace(config, **{section: replace(getattr(config, section), **updates)})


def load_config(path: Optional[str | os.PathLike] = None, base: Optional[RunConfig] = None) -> RunConfig:
    """Read an INI file on top of ``base`` (defaults when omitted)."""
    config = base or RunConfig()
    if path is None:
        return config
    parser = configparser.ConfigParser(interpolation=None, default_section="__no_default__")
    parser.optionxform = str  # keep key case
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for section in parser.sections():
        config = apply_updates(config, section, dict(parser.items(section)), str(path))
    # enabled_streams lives in two sections; whichever the file sets wins for both
    for section in ("model", "train"):
        if parser.has_section(section) and parser.has_option(section, "enabled_streams"):
            return config.with_streams(getattr(config, section).enabled_streams)
    return config
