"""Run configuration: flat INI sections with a complete default schema.

A config file may set any subset of the keys below; everything else
falls back to the default.  Unknown sections or keys are errors, not
warnings, so a typo cannot silently run a different experiment.  All
values are scalars (int, float, bool, str), coerced by the type of the
default they override.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

DEFAULTS: dict[str, dict] = {
    "run": {
        "category": "laptop",
        "seed": 0,
        "out": "runs",
        "threads": 1,
    },
    "gd": {
        "lr": 0.015,
        "steps": 50,
        "beta1": 0.8,
        "beta2": 0.999,
    },
    "bc": {
        "demos": 10000,
        "epochs": 60,
        "batch": 256,
        "lr": 3e-3,
        "hidden": 256,
        "include_latent": True,
        "lr_decay_stages": 3,
    },
    "dagger": {
        "rounds": 4,
        "rollouts_per_round": 100,
        "steps": 10,
        "epochs_per_round": 8,
        "reset_per_round": False,
    },
    "rl": {
        "total_steps": 20000,
        "batch": 256,
        "replay": 100000,
        "gamma": 0.0,
        "tau": 0.005,
        "lr": 3e-4,
        "start_random": 1000,
        "expert_fraction": 0.5,
        "episode_steps": 10,
    },
    "eval": {
        "episodes": 50,
        "steps": 10,
        "timing_images": 10,
        "figures": True,
    },
}


def _coerce(section: str, key: str, raw: str):
    default = DEFAULTS[section][key]
    if isinstance(default, bool):
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"[{section}] {key}: not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


@dataclass(frozen=True)
class Config:
    """Resolved configuration: defaults overlaid with one INI file."""

    values: dict[str, dict] = field(default_factory=dict)

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def as_ini(self) -> str:
        """Render back to INI text, the manifest's config echo."""
        lines = []
        for section in DEFAULTS:
            lines.append(f"[{section}]")
            for key, value in self.values[section].items():
                lines.append(f"{key} = {value}")
            lines.append("")
        return "\n".join(lines)


def load_config(path=None) -> Config:
    """Defaults, then the file at path (if given) on top.

    Raises FileNotFoundError for a missing path and ValueError for
    unknown sections, unknown keys, or values that do not parse as the
    default's type.
    """
    values = {s: dict(kv) for s, kv in DEFAULTS.items()}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        parser.read_string(path.read_text())
        for section in parser.sections():
            if section not in DEFAULTS:
                raise ValueError(f"unknown config section [{section}]")
            for key, raw in parser[section].items():
                if key not in DEFAULTS[section]:
                    raise ValueError(f"unknown key {key!r} in section [{section}]")
                values[section][key] = _coerce(section, key, raw)
    return Config(values)
