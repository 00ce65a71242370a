"""Run configuration: flat key = value text with bracketed sections.

Every default is the published setup, so a config carrying only the [data]
paths runs the standard pipeline. Unknown sections or keys are fatal, not
ignored; silent typos in experiment configs are how results stop being
reproducible.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .evaluation import RegionSpec
from .features import VARIANTS

_SCHEMA = {
    "data": {"stations", "sensors", "roads", "traffic"},
    "kernel": {"density_d_km", "context_d_km"},
    "split": {"ratio", "seed"},
    "model": {"variant", "seed"},
    "train": {"epochs", "batch_size", "learning_rate", "shuffle_seed", "deterministic"},
    "regions": None,  # free-form: name = lat_min,lat_max,lon_min,lon_max
}


@dataclass
class RunConfig:
    stations: str | None = None
    sensors: str | None = None
    roads: str | None = None
    traffic: str | None = None
    density_d_km: float = 10.0
    context_d_km: float = 0.1
    split_ratio: float = 0.8
    split_seed: int = 20190101
    variant: str = "station_and_sensor"
    model_seed: int = 7
    epochs: int = 2
    batch_size: int = 64
    learning_rate: float = 0.001
    shuffle_seed: int = 11
    deterministic: bool = True
    regions: dict[str, RegionSpec] = field(default_factory=dict)

    def source_paths(self) -> tuple[str, str, str, str]:
        missing = [name for name in ("stations", "sensors", "roads", "traffic")
                   if getattr(self, name) is None]
        if missing:
            raise ConfigError(f"config is missing [data] paths: {', '.join(missing)}")
        return self.stations, self.sensors, self.roads, self.traffic


def _positive(value: float, what: str) -> float:
    if not value > 0:
        raise ConfigError(f"{what} must be positive, got {value}")
    return value


def load_config(path=None) -> RunConfig:
    """Parse a config file; with no path, return the paper-default setup."""
    cfg = RunConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as f:
            parser.read_file(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc

    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        allowed = _SCHEMA[section]
        for key, value in parser.items(section):
            if allowed is not None and key not in allowed:
                raise ConfigError(f"unknown config key {key!r} in [{section}]")
            try:
                _apply(cfg, section, key, value, Path(path).parent)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"bad value for {key!r} in [{section}]: {exc}") from exc
    if cfg.variant not in VARIANTS:
        raise ConfigError(f"unknown model variant {cfg.variant!r}")
    if not 0.0 < cfg.split_ratio < 1.0:
        raise ConfigError(f"split ratio must be in (0, 1), got {cfg.split_ratio}")
    return cfg


def _apply(cfg: RunConfig, section: str, key: str, value: str, base: Path):
    if section == "data":
        text = value.strip()
        path = Path(text)
        setattr(cfg, key, str(path if path.is_absolute() else base / path))
    elif section == "kernel":
        setattr(cfg, key, _positive(float(value), key))
    elif section == "split":
        if key == "ratio":
            cfg.split_ratio = float(value)
        else:
            cfg.split_seed = int(value)
    elif section == "model":
        if key == "variant":
            cfg.variant = value.strip()
        else:
            cfg.model_seed = int(value)
    elif section == "train":
        if key == "epochs":
            cfg.epochs = int(value)
        elif key == "batch_size":
            cfg.batch_size = int(value)
        elif key == "learning_rate":
            cfg.learning_rate = _positive(float(value), key)
        elif key == "shuffle_seed":
            cfg.shuffle_seed = int(value)
        else:
            lowered = value.strip().lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"not a boolean: {value!r}")
            cfg.deterministic = lowered in ("true", "1", "yes")
    elif section == "regions":
        parts = [float(v) for v in value.split(",")]
        if len(parts) != 4:
            raise ValueError("expected lat_min,lat_max,lon_min,lon_max")
        cfg.regions[key] = RegionSpec(key, *parts)
