"""Experiment configuration files: INI-style sections of key=value pairs.

Unknown sections or keys are rejected so a typo cannot silently change an
experiment, and the raw text is carried along so every run summary can
echo its exact configuration.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Malformed, unknown, or missing configuration entries."""


def _to_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def _to_seeds(raw: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in raw.replace(" ", "").split(",") if part)
    except ValueError:
        raise ConfigError(f"seeds must be comma-separated integers, got {raw!r}") from None


_SCHEMA: dict[str, dict] = {
    "dataset": {"path": str},
    "run": {
        "kind": str, "seeds": _to_seeds, "lag": int,
        "train_days": int, "test_days": int, "scale": _to_bool, "jobs": int,
    },
    "model": {
        "cell": str, "bidirectional": _to_bool, "hidden_size": int, "activation": str,
    },
    "train": {"batch_size": int, "learning_rate": float, "epochs": int},
    "dp": {"l2_norm_clip": float, "noise_multiplier": float, "num_microbatches": int},
    "privacy": {"epsilon": float, "delta": float, "sensitivity": float},
    "tune": {"budget": int, "strategy": str, "epochs": int},
}

_RUN_KINDS = ("baseline", "nonprivate", "gradient", "input")


@dataclass
class ExperimentConfig:
    """Parsed configuration plus the verbatim text it came from."""

    values: dict[str, dict] = field(default_factory=dict)
    raw_text: str = ""
    path: str = ""

    def get(self, section: str, key: str, default=None):
        return self.values.get(section, {}).get(key, default)

    def section(self, section: str) -> dict:
        return dict(self.values.get(section, {}))

    def require(self, section: str, key: str):
        value = self.get(section, key)
        if value is None:
            raise ConfigError(f"missing required config entry [{section}] {key}")
        return value

    def echo(self) -> dict:
        return {sec: dict(vals) for sec, vals in self.values.items()}


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    values: dict[str, dict] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"{path}: unknown section [{section}]")
        section_schema = _SCHEMA[section]
        values[section] = {}
        for key, raw in parser.items(section):
            if key not in section_schema:
                raise ConfigError(f"{path}: unknown key {key!r} in section [{section}]")
            caster = section_schema[key]
            try:
                values[section][key] = caster(raw)
            except ConfigError:
                raise
            except ValueError:
                raise ConfigError(
                    f"{path}: bad value {raw!r} for [{section}] {key}"
                ) from None
    kind = values.get("run", {}).get("kind")
    if kind is not None and kind not in _RUN_KINDS:
        raise ConfigError(f"{path}: run kind must be one of {_RUN_KINDS}, got {kind!r}")
    return ExperimentConfig(values=values, raw_text=text, path=str(path))
