"""Physical-layer constants and config-file parsing.

Config files are YAML with nested sections. Keys carry their unit as a
suffix; logarithmic units (``_dbm``, ``_db``, ``_dbm_per_hz``) are converted
to linear values exactly once, when the file is parsed::

    channel:
      block_size_bits: 8.0e6
      bandwidth_hz: 180.0e3
      tx_power_dbm: 23
      unit_gain_db: -30
      path_loss_exp: 3.38
      noise_density_dbm_per_hz: -174
      getdata_rate_mu: 0.05
      meters_per_unit: 1000
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ConfigError


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** (dbm / 10.0) / 1000.0


def db_to_linear(db: float) -> float:
    return 10.0 ** (db / 10.0)


@dataclass(frozen=True)
class ChannelParams:
    """Link-budget constants. All values are linear (W, W/Hz, Hz, bits)."""

    block_size_bits: float = 8.0e6
    bandwidth_hz: float = 180.0e3
    tx_power_watts: float = dbm_to_watts(23.0)
    unit_gain: float = db_to_linear(-30.0)
    path_loss_exp: float = 3.38
    noise_density_w_per_hz: float = dbm_to_watts(-174.0)
    # keeps mu * gamma < 1 on every unit-square hop at 180 kHz (max gamma ~ 15.6 s)
    getdata_rate_mu: float = 0.05
    meters_per_unit: float = 1000.0

    def __post_init__(self) -> None:
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise ConfigError(f"{f.name} must be a finite positive number, got {value!r}")

    def with_bandwidth(self, bandwidth_hz: float) -> "ChannelParams":
        return dataclasses.replace(self, bandwidth_hz=float(bandwidth_hz))

    @classmethod
    def from_mapping(cls, section: Mapping[str, Any]) -> "ChannelParams":
        """Build from a config section, converting dB/dBm keys to linear."""
        converters = {
            "tx_power_dbm": ("tx_power_watts", dbm_to_watts),
            "unit_gain_db": ("unit_gain", db_to_linear),
            "noise_density_dbm_per_hz": ("noise_density_w_per_hz", dbm_to_watts),
        }
        names = {f.name for f in dataclasses.fields(cls)}
        kwargs: dict[str, float] = {}
        for key, value in section.items():
            if key in converters:
                target, conv = converters[key]
                kwargs[target] = conv(float(value))
            elif key in names:
                kwargs[key] = float(value)
            else:
                raise ConfigError(f"unknown channel key {key!r}")
        return cls(**kwargs)


def load_config(path: str | Path | None) -> dict[str, Any]:
    """Read a YAML config file; ``None`` yields an empty config."""
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    with p.open() as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be a mapping, got {type(data).__name__}")
    return data


def channel_from_config(cfg: Mapping[str, Any]) -> ChannelParams:
    return ChannelParams.from_mapping(cfg.get("channel", {}) or {})
