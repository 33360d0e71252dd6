"""Run configuration: TOML files, --section.key=value overrides, snapshots.

Flag overrides win over file values; the resolved snapshot persisted next to
run outputs round-trips losslessly through the same parser.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields

try:
    import tomllib  # py >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .errors import ConfigurationError
from .pipeline import DataConfig, ModelConfig, TrainConfig

SECTIONS = ("model", "data", "train", "run")


@dataclass
class RunOptions:
    out_dir: "str | None" = None


@dataclass
class RunConfig:
    model: ModelConfig
    data: DataConfig
    train: TrainConfig
    run: RunOptions

    def as_dict(self) -> dict:
        return {
            "model": _dataclass_dict(self.model),
            "data": _dataclass_dict(self.data),
            "train": _dataclass_dict(self.train),
            "run": _dataclass_dict(self.run),
        }


_SECTION_TYPES = {"model": ModelConfig, "data": DataConfig, "train": TrainConfig,
                  "run": RunOptions}


def _dataclass_dict(obj) -> dict:
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def _coerce(section: str, key: str, value, current):
    """Parse a raw string/TOML value into the type of the existing field."""
    if isinstance(value, str) and not isinstance(current, str):
        s = value.strip()
        if current is None or isinstance(current, (list, tuple)):
            try:
                value = json.loads(s)
            except json.JSONDecodeError as e:
                raise ConfigurationError(f"{section}.{key}: cannot parse {s!r}") from e
        elif isinstance(current, bool):
            if s.lower() in ("true", "1", "yes"):
                value = True
            elif s.lower() in ("false", "0", "no"):
                value = False
            else:
                raise ConfigurationError(f"{section}.{key}: expected bool, got {s!r}")
        elif isinstance(current, int):
            value = int(s)
        elif isinstance(current, float):
            value = float(s)
    if isinstance(current, bool) and not isinstance(value, bool):
        raise ConfigurationError(f"{section}.{key}: expected bool, got {value!r}")
    if isinstance(current, int) and not isinstance(current, bool) and isinstance(value, bool):
        raise ConfigurationError(f"{section}.{key}: expected int, got bool")
    if isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if isinstance(current, tuple):
        value = tuple(value)
    return value


def _apply(section_obj, section: str, updates: dict):
    valid = {f.name for f in fields(section_obj)}
    for key, value in updates.items():
        if key not in valid:
            raise ConfigurationError(
                f"unknown field {section}.{key} (valid: {sorted(valid)})")
        current = getattr(section_obj, key)
        setattr(section_obj, key, _coerce(section, key, value, current))


def default_config() -> RunConfig:
    return RunConfig(model=ModelConfig(), data=DataConfig(), train=TrainConfig(),
                     run=RunOptions())


def load_config_file(path) -> dict:
    with open(path, "rb") as fp:
        raw = tomllib.load(fp)
    for section in raw:
        if section not in SECTIONS:
            raise ConfigurationError(f"unknown config section [{section}]")
    return raw


def resolve_config(file_dict: "dict | None" = None,
                   overrides: "list[tuple[str, str, object]] | None" = None) -> RunConfig:
    """Defaults <- file values <- flag overrides, with typed coercion."""
    cfg = default_config()
    if file_dict:
        for section, updates in file_dict.items():
            _apply(getattr(cfg, section), section, dict(updates))
    for section, key, value in overrides or []:
        if section not in SECTIONS:
            raise ConfigurationError(f"unknown config section {section!r}")
        _apply(getattr(cfg, section), section, {key: value})
    cfg.train.validate()
    return cfg


def parse_override_flag(flag: str):
    """'--section.key=value' -> (section, key, value-string)."""
    if not flag.startswith("--") or "=" not in flag or "." not in flag.split("=", 1)[0]:
        raise ConfigurationError(
            f"cannot parse override {flag!r}; expected --section.key=value")
    head, value = flag[2:].split("=", 1)
    section, key = head.split(".", 1)
    return section, key, value


# --------------------------------------------------------------------------- #
# TOML emission (subset sufficient for our value types)
# --------------------------------------------------------------------------- #

def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigurationError(f"cannot serialize config value {v!r}")


def dump_toml(tree: dict) -> str:
    lines = []
    for section, values in tree.items():
        lines.append(f"[{section}]")
        for key, v in values.items():
            if v is None:
                continue  # unset optional fields are omitted
            lines.append(f"{key} = {_toml_value(v)}")
        lines.append("")
    return "\n".join(lines)


def write_snapshot(path, cfg: RunConfig) -> None:
    with open(path, "w") as fp:
        fp.write(dump_toml(cfg.as_dict()))
