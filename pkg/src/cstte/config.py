"""Run configuration: one TOML file drives every pipeline stage.

Sections mirror the module layout ([synthgen], [trajdata], [encoder],
[augment], [pretrain], [downstream]) and every key carries a default, so a
minimal config is little more than dataset paths. Parsing is strict: an
unknown key is rejected with its dotted path instead of silently falling
back to a default.
"""

from __future__ import annotations

import json
import os
from dataclasses import fields as dataclass_fields
from pathlib import Path
from typing import Any, Optional

try:
    import tomllib
except ImportError:  # Python 3.10
    import tomli as tomllib

from cstte.downstream import HeadConfig
from cstte.encoder import EncoderConfig
from cstte.errors import ConfigError
from cstte.pretrain import TrainConfig
from cstte.synthgen import SynthConfig

OUTPUT_ROOT_ENV = "CSTTE_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"


def _dataclass_defaults(cls, skip=()) -> dict:
    out = {}
    for f in dataclass_fields(cls):
        if f.name in skip:
            continue
        value = f.default
        if isinstance(value, tuple):
            value = list(value)
        out[f.name] = value
    return out


def defaults() -> dict:
    """The full schema with every default filled in; section values are
    derived from the owning dataclasses so the two cannot drift apart."""
    return {
        "seed": 42,
        "output_dir": "",
        "dataset": "",
        "processed": "",
        "threads": 1,
        "deterministic": True,
        "synthgen": _dataclass_defaults(SynthConfig, skip=("seed",)),
        "trajdata": {
            "interval_seconds": 60.0,
            "min_length": 20,
            "cell_size_meters": 250.0,
            "split": [0.8, 0.1, 0.1],
        },
        "encoder": _dataclass_defaults(EncoderConfig, skip=("n_locations",)),
        "augment": {"name": "two_hop", "keep_prob": 0.5},
        "pretrain": _dataclass_defaults(
            TrainConfig, skip=("seed", "augmentation", "keep_prob")
        ),
        "downstream": _dataclass_defaults(HeadConfig),
    }


def _coerce(default: Any, value: Any, path: str) -> Any:
    # bool first: it is an int subclass and must not satisfy int/float slots
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key {path!r} expects a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {path!r} expects an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {path!r} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"config key {path!r} expects a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"config key {path!r} expects a list, got {value!r}")
        slot = default[0]
        return [_coerce(slot, item, f"{path}[{i}]") for i, item in enumerate(value)]
    raise AssertionError(f"schema slot {path!r} has unsupported type {type(default)}")


def _merge_strict(schema: dict, user: dict, prefix: str = "") -> dict:
    for key in user:
        dotted = f"{prefix}{key}"
        if key not in schema:
            raise ConfigError(f"unknown config key {dotted!r}")
    out: dict = {}
    for key, default in schema.items():
        dotted = f"{prefix}{key}"
        if key not in user:
            out[key] = json.loads(json.dumps(default))  # deep copy of plain data
        elif isinstance(default, dict):
            if not isinstance(user[key], dict):
                raise ConfigError(f"config key {dotted!r} expects a [{dotted}] section")
            out[key] = _merge_strict(default, user[key], f"{dotted}.")
        else:
            out[key] = _coerce(default, user[key], dotted)
    return out


class RunConfig:
    """Merged, validated configuration for one pipeline run."""

    SECTIONS = ("synthgen", "trajdata", "encoder", "augment", "pretrain", "downstream")

    def __init__(self, overrides: Optional[dict] = None):
        data = _merge_strict(defaults(), overrides or {})
        self.seed: int = data["seed"]
        self.output_dir: str = data["output_dir"]
        self.dataset: str = data["dataset"]
        self.processed: str = data["processed"]
        self.threads: int = data["threads"]
        self.deterministic: bool = data["deterministic"]
        self.synthgen: dict = data["synthgen"]
        self.trajdata: dict = data["trajdata"]
        self.encoder: dict = data["encoder"]
        self.augment: dict = data["augment"]
        self.pretrain: dict = data["pretrain"]
        self.downstream: dict = data["downstream"]
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")

    # -- construction ------------------------------------------------------

    @classmethod
    def from_toml(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        with open(path, "rb") as fh:
            try:
                raw = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                # the decoder message carries the line and column
                raise ConfigError(f"config parse error in {path}: {exc}") from exc
        return cls(raw)

    def to_dict(self) -> dict:
        out: dict = {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "dataset": self.dataset,
            "processed": self.processed,
            "threads": self.threads,
            "deterministic": self.deterministic,
        }
        for section in self.SECTIONS:
            out[section] = dict(getattr(self, section))
        return out

    # -- serialization -----------------------------------------------------

    @staticmethod
    def _format_value(value) -> str:
        if isinstance(value, bool):
            return "true" if value else "false"
        if isinstance(value, int):
            return str(value)
        if isinstance(value, float):
            return repr(value)
        if isinstance(value, str):
            return json.dumps(value)
        if isinstance(value, list):
            return "[" + ", ".join(RunConfig._format_value(v) for v in value) + "]"
        raise AssertionError(f"cannot serialize {value!r}")

    def toml_text(self) -> str:
        d = self.to_dict()
        lines = []
        for key in ("seed", "output_dir", "dataset", "processed", "threads", "deterministic"):
            lines.append(f"{key} = {self._format_value(d[key])}")
        for section in self.SECTIONS:
            lines.append("")
            lines.append(f"[{section}]")
            for key, value in d[section].items():
                lines.append(f"{key} = {self._format_value(value)}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.toml_text())

    # -- typed views -------------------------------------------------------

    def synth_config(self) -> SynthConfig:
        return SynthConfig(seed=self.seed, **self.synthgen)

    def encoder_config(self, n_locations: int) -> EncoderConfig:
        kwargs = dict(self.encoder)
        kwargs["anchor_lengths"] = tuple(kwargs["anchor_lengths"])
        return EncoderConfig(n_locations=n_locations, **kwargs)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            seed=self.seed,
            augmentation=self.augment["name"],
            keep_prob=self.augment["keep_prob"],
            **self.pretrain,
        )

    def head_config(self) -> HeadConfig:
        return HeadConfig(**self.downstream)

    def split_ratios(self) -> tuple[float, float, float]:
        split = self.trajdata["split"]
        if len(split) != 3 or any(r <= 0 for r in split):
            raise ConfigError(f"trajdata.split must be three positive ratios, got {split}")
        return tuple(split)

    def resolved_output_root(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        return Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT))
