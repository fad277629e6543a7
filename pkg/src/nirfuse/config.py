"""Run configuration: INI-style sections, typed by their defaults.

    [net]       scales, base_channels, blocks_per_scale, fusion_mode, ...
    [sfm]       kernel_size, arrangement, blocks_gmm, blocks_lmm
    [noise]     preset, sigma, brightness_scale, seed
    [trainer]   steps, batch, patch, lr_start, lr_end, schedule, ...
    [data]      train_fraction, split_seed, augment

Command-line overrides use ``section.key=value``. Unknown sections or keys
are rejected.
"""

from __future__ import annotations

import configparser
import copy
from pathlib import Path
from typing import Dict, Iterable, Optional

from .data import NoiseSpec, get_preset
from .errors import ConfigError
from .net import NetConfig
from .trainer import TrainConfig

DEFAULTS: Dict[str, dict] = {
    "net": {"scales": 2, "base_channels": 8, "blocks_per_scale": 2, "fusion_mode": "sfm",
            "sfm_per_scale": 1, "supervise_coarsest": False, "seed": 0, "dtype": "float64"},
    "sfm": {"kernel_size": 5, "arrangement": "gmm,lmm", "blocks_gmm": 1, "blocks_lmm": 1},
    "noise": {"preset": "dvd-sigma8", "sigma": -1.0, "brightness_scale": 1.0, "seed": 0},
    "trainer": {"steps": 2000, "batch": 4, "patch": 32, "lr_start": 1e-3, "lr_end": 1e-6,
                "schedule": "cosine", "halve_every": 20000, "grad_clip": 1.0, "seed": 0,
                "checkpoint_every": 0, "log_every": 100},
    "data": {"train_fraction": 0.7, "split_seed": 0, "augment": True},
}


def _convert(section: str, key: str, raw, default):
    if isinstance(raw, type(default)) and not isinstance(raw, str):
        return raw
    s = str(raw).strip()
    try:
        if isinstance(default, bool):
            low = s.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(s)
        if isinstance(default, int):
            return int(s)
        if isinstance(default, float):
            return float(s)
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot parse {s!r} as {type(default).__name__}") from None
    return s


class RunConfig:
    def __init__(self, values: Optional[Dict[str, dict]] = None):
        self.values = copy.deepcopy(DEFAULTS)
        for section, items in (values or {}).items():
            for key, raw in items.items():
                self.set(section, key, raw)

    def set(self, section: str, key: str, raw) -> None:
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        self.values[section][key] = _convert(section, key, raw, DEFAULTS[section][key])

    def apply_overrides(self, overrides: Iterable[str]) -> None:
        for item in overrides:
            name, sep, raw = item.partition("=")
            section, dot, key = name.strip().partition(".")
            if not sep or not dot:
                raise ConfigError(f"override {item!r} is not section.key=value")
            self.set(section, key, raw)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path) as f:
                parser.read_file(f)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except configparser.Error as e:
            raise ConfigError(f"malformed config {path}: {e}") from e
        return cls({s: dict(parser.items(s)) for s in parser.sections()})

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def net_config(self) -> NetConfig:
        n, s = self.values["net"], self.values["sfm"]
        arrangement = tuple(a.strip() for a in s["arrangement"].split(",") if a.strip())
        return NetConfig(scales=n["scales"], base_channels=n["base_channels"],
                         blocks_per_scale=n["blocks_per_scale"], fusion_mode=n["fusion_mode"],
                         sfm_per_scale=n["sfm_per_scale"], sfm_kernel_size=s["kernel_size"],
                         sfm_arrangement=arrangement, sfm_blocks_gmm=s["blocks_gmm"],
                         sfm_blocks_lmm=s["blocks_lmm"], supervise_coarsest=n["supervise_coarsest"],
                         seed=n["seed"], dtype=n["dtype"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.values["trainer"])

    def noise(self) -> tuple:
        """(preset, NoiseSpec or None); a non-negative ``sigma`` overrides the preset's."""
        v = self.values["noise"]
        preset = get_preset(v["preset"])
        spec = preset.noise
        if v["sigma"] >= 0:
            spec = NoiseSpec(v["sigma"], v["brightness_scale"], v["seed"])
        elif spec is not None:
            spec = NoiseSpec(spec.sigma, v["brightness_scale"], v["seed"])
        return preset, spec

    def echo(self) -> str:
        """Fully resolved configuration as ``section.key = value`` lines."""
        lines = []
        for section, items in self.values.items():
            for key, value in items.items():
                lines.append(f"{section}.{key} = {value}")
        return "\n".join(lines) + "\n"

    def write_echo(self, path) -> None:
        Path(path).write_text(self.echo())
