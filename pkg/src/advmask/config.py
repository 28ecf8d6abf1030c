"""Serializable run configuration (JSON with a schema version; unknown keys are rejected)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .models import EncoderConfig
from .objectives import ObjectiveConfig
from .training import PretrainConfig, TransferConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class SweepConfig:
    fractions: tuple = (1.0, 0.1, 0.01)
    seeds: int = 3
    tasks: tuple = ("arrhythmia", "gender")
    scratch: bool = False

    def __post_init__(self):
        self.fractions = tuple(float(f) for f in self.fractions)
        self.tasks = tuple(self.tasks)
        if not self.fractions:
            raise ConfigError("sweep.fractions must not be empty")
        if any(not 0 < f <= 1 for f in self.fractions):
            raise ConfigError(f"sweep.fractions must lie in (0, 1], got {self.fractions}")
        if self.seeds < 1:
            raise ConfigError("sweep.seeds must be >= 1")


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    transfer: TransferConfig = field(default_factory=TransferConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    split_fractions: tuple = (0.8, 0.1, 0.1)
    data: str | None = None
    checkpoint: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_fractions"] = list(self.split_fractions)
        d["sweep"]["fractions"] = list(self.sweep.fractions)
        d["sweep"]["tasks"] = list(self.sweep.tasks)
        d["pretrain"]["encoder"]["stage_widths"] = list(self.pretrain.encoder.stage_widths)
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("run config must be a JSON object")
        version = raw.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"run config schema_version {version}, this build reads {SCHEMA_VERSION}")
        _check_keys("config", raw, cls)
        kw = {k: v for k, v in raw.items() if k not in ("pretrain", "transfer", "sweep")}
        if "split_fractions" in kw:
            kw["split_fractions"] = tuple(kw["split_fractions"])
        pre = dict(raw.get("pretrain", {}))
        _check_keys("pretrain", pre, PretrainConfig)
        _check_keys("pretrain.objective", pre.get("objective", {}), ObjectiveConfig)
        _check_keys("pretrain.encoder", pre.get("encoder", {}), EncoderConfig)
        tr = dict(raw.get("transfer", {}))
        _check_keys("transfer", tr, TransferConfig)
        sw = dict(raw.get("sweep", {}))
        _check_keys("sweep", sw, SweepConfig)
        try:
            if "objective" in pre:
                pre["objective"] = ObjectiveConfig(**pre["objective"])
            if "encoder" in pre:
                pre["encoder"] = EncoderConfig(**pre["encoder"])
            return cls(pretrain=PretrainConfig(**pre), transfer=TransferConfig(**tr), sweep=SweepConfig(**sw), **kw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(raw)


def _check_keys(where: str, raw, cls):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}; valid keys: {sorted(known)}")
