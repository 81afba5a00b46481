"""Settings merged from flags, ``NVSCOPE_*`` environment variables and a TOML file.

Precedence, highest first: command-line flags, environment, config file,
built-in defaults. The config file path comes from ``--config`` or
``NVSCOPE_CONFIG``; its sections are ``[pll]``, ``[nv]``, ``[sweep]`` and
``[serial]``, with keys named as in :data:`KEYS`.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .controller import DEFAULT_BAUD
from .physics import NvParameters
from .pll import PllConfig
from .spectrum import SweepPlan

ENV_PREFIX = "NVSCOPE_"


def _bool(value) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


@dataclass(frozen=True)
class SerialSettings:
    port: Optional[str] = None
    baud: int = DEFAULT_BAUD
    timeout_ms: int = 2000


# key -> (section, converter); env var is NVSCOPE_<KEY>
KEYS: dict[str, tuple[str, Any]] = {
    "ref_mhz": ("pll", float),
    "r_counter": ("pll", int),
    "doubler": ("pll", _bool),
    "rdiv2": ("pll", _bool),
    "d_mhz": ("nv", float),
    "e_mhz": ("nv", float),
    "gamma_mhz_per_mt": ("nv", float),
    "linewidth_mhz": ("nv", float),
    "contrast": ("nv", float),
    "baseline_mv": ("nv", float),
    "start_mhz": ("sweep", float),
    "stop_mhz": ("sweep", float),
    "step_mhz": ("sweep", float),
    "n_avg": ("sweep", int),
    "settle_ms": ("sweep", int),
    "port": ("serial", str),
    "baud": ("serial", int),
    "timeout_ms": ("serial", int),
}

_SECTION_TYPES = {"pll": PllConfig, "nv": NvParameters, "sweep": SweepPlan, "serial": SerialSettings}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CliConfig:
    pll: PllConfig = field(default_factory=PllConfig)
    nv: NvParameters = field(default_factory=NvParameters)
    sweep: SweepPlan = field(default_factory=SweepPlan)
    serial: SerialSettings = field(default_factory=SerialSettings)


def _read_toml(path: Path) -> dict[str, Any]:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    values = {}
    for section, table in data.items():
        if section not in _SECTION_TYPES or not isinstance(table, dict):
            raise ConfigError(f"unknown config section [{section}]")
        for key, value in table.items():
            if KEYS.get(key, (None,))[0] != section:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            values[key] = value
    return values


def load_config(
    flags: Optional[Mapping[str, Any]] = None,
    env: Optional[Mapping[str, str]] = None,
    config_path: Optional[str] = None,
) -> CliConfig:
    """Merge all sources and validate every section before returning."""
    flags = {k: v for k, v in (flags or {}).items() if v is not None}
    env = os.environ if env is None else env
    path = config_path or env.get(ENV_PREFIX + "CONFIG")
    merged: dict[str, Any] = {}
    if path:
        merged.update(_read_toml(Path(path)))
    for key in KEYS:
        if ENV_PREFIX + key.upper() in env:
            merged[key] = env[ENV_PREFIX + key.upper()]
    merged.update({k: v for k, v in flags.items() if k in KEYS})

    sections: dict[str, dict[str, Any]] = {name: {} for name in _SECTION_TYPES}
    for key, value in merged.items():
        section, convert = KEYS[key]
        try:
            sections[section][key] = convert(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid value for {key}: {value!r}") from exc
    built = {}
    for name, cls in _SECTION_TYPES.items():
        allowed = {f.name for f in fields(cls)}
        try:
            built[name] = cls(**{k: v for k, v in sections[name].items() if k in allowed})
        except ValueError as exc:
            raise ConfigError(f"[{name}] {exc}") from exc
    return CliConfig(**built)
