"""INI experiment configs with dot-path overrides.

A config has up to five sections: ``[data]``, ``[mae]``, ``[run]``,
``[regression_head]`` and ``[seg_head]``. ``[mae] preset`` chooses the
base (``desk`` or ``paper``) before the remaining keys are applied.
Overrides use ``section.key=value`` and always beat file values.
"""

from __future__ import annotations

import ast
import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .heads import RegressionHeadConfig, SegHeadConfig
from .harness.train import RunConfig
from .vit_mae import MaeConfig


class ConfigError(ValueError):
    """Bad or unknown config key; the message names the key."""


@dataclass(frozen=True)
class DataConfig:
    n_tiles: int = 256
    synth_seed: int = 0
    tile_size: int = 64
    band_height_deg: float = 0.5
    pattern: str = "TTTVE"


SECTIONS = {
    "data": DataConfig,
    "mae": MaeConfig,
    "run": RunConfig,
    "regression_head": RegressionHeadConfig,
    "seg_head": SegHeadConfig,
}
PAPER_BATCH_SIZE = 64
PRESETS = {"desk": MaeConfig.desk, "paper": MaeConfig}
HEAD_PRESETS = {
    "desk": (RegressionHeadConfig.desk, SegHeadConfig.desk),
    "paper": (RegressionHeadConfig, SegHeadConfig),
}


@dataclass
class ExperimentConfig:
    preset: str = "desk"
    values: dict[str, dict[str, Any]] = field(default_factory=lambda: {s: {} for s in SECTIONS})

    def _build(self, section: str, base):
        try:
            return dataclasses.replace(base, **self.values[section]) if self.values[section] else base
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"[{section}] {exc}") from exc

    @property
    def data(self) -> DataConfig:
        return self._build("data", DataConfig())

    @property
    def mae(self) -> MaeConfig:
        return self._build("mae", PRESETS[self.preset]())

    @property
    def regression_head(self) -> RegressionHeadConfig:
        return self._build("regression_head", HEAD_PRESETS[self.preset][0]())

    @property
    def seg_head(self) -> SegHeadConfig:
        return self._build("seg_head", HEAD_PRESETS[self.preset][1]())

    def head(self, task: str):
        return self.regression_head if task == "modisveg" else self.seg_head

    def run(self, task: str) -> RunConfig:
        values = {"task": task, **self.values["run"]}
        if self.preset == "paper":
            values.setdefault("batch_size", PAPER_BATCH_SIZE)
        if task == "pretrain":
            values.pop("label_fraction", None)
        try:
            return RunConfig(**values)
        except TypeError as exc:
            raise ConfigError(f"[run] {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"[run] {exc}") from exc

    def set(self, section: str, key: str, raw) -> None:
        if section == "mae" and key == "preset":
            if raw not in PRESETS:
                raise ConfigError(f"mae.preset must be one of {sorted(PRESETS)}, got {raw!r}")
            self.preset = raw
            return
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r} (key {section}.{key})")
        kinds = {f.name: f for f in fields(SECTIONS[section])}
        if key not in kinds:
            raise ConfigError(f"unknown config key {section}.{key}")
        self.values[section][key] = _coerce(section, key, kinds[key], raw)

    def resolved(self, task: str | None = None) -> dict:
        """Every effective value, suitable for an exact replay."""
        out = {
            "mae": {"preset": self.preset, **self.mae.to_dict()},
            "data": dataclasses.asdict(self.data),
            "regression_head": self.regression_head.to_dict(),
            "seg_head": self.seg_head.to_dict(),
        }
        if task is not None:
            out["run"] = self.run(task).to_dict()
        else:
            out["run"] = dict(self.values["run"])
        return out


def _coerce(section: str, key: str, f: dataclasses.Field, raw):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if text.lower() in ("none", "null", ""):
        return None
    kind = str(f.type)
    try:
        if kind.startswith("str"):
            return text
        if kind.startswith("bool"):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
        if kind.startswith("tuple"):
            value = ast.literal_eval(text)
            return tuple(value) if isinstance(value, (list, tuple)) else (value,)
        return ast.literal_eval(text)
    except (ValueError, SyntaxError) as exc:
        raise ConfigError(f"bad value for {section}.{key}: {raw!r} (expected {kind})") from exc


def parse_override(text: str) -> tuple[str, str, str]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    path, value = text.split("=", 1)
    if "." not in path:
        raise ConfigError(f"override key {path!r} needs a section, e.g. run.{path}")
    section, key = path.strip().split(".", 1)
    return section, key, value


def load_config(path=None, overrides=()) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        # preset first so the remaining [mae] keys land on the right base
        if parser.has_option("mae", "preset"):
            cfg.set("mae", "preset", parser.get("mae", "preset"))
        for section in parser.sections():
            for key, value in parser.items(section):
                if not (section == "mae" and key == "preset"):
                    cfg.set(section, key, value)
    for text in overrides:
        cfg.set(*parse_override(text))
    return cfg


def _ini_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, (list, tuple)):
        return repr(tuple(value))
    return str(value)


def write_snapshot(resolved: dict, path) -> Path:
    """Write a resolved config as INI; ``load_config`` on it reproduces the run."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section, values in resolved.items():
        parser[section] = {k: _ini_value(v) for k, v in values.items() if not (section == "run" and k == "task")}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        parser.write(fh)
    return path
