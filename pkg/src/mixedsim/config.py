"""Experiment configuration (strict JSON)."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

CONFIG_VERSION = 1
KINDS = ("fit", "tune", "faults", "noise", "thermal", "train", "retention")


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists ``(field path, message)``."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"{p}: {m}" for p, m in self.errors))


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DatasetConfig(_Strict):
    n_train: int = Field(6000, ge=10)
    n_val: int = Field(2000, ge=10)
    n_test: int = Field(2000, ge=10)
    seed: int = 0


class NetworkConfig(_Strict):
    channels: tuple[int, int] = (8, 16)
    hidden: int = Field(64, ge=1)
    epochs: int = Field(10, ge=0)
    batch_size: int = Field(64, ge=1)
    optimizer: Literal["adam", "sgd"] = "adam"
    lr: float = Field(1e-3, ge=0)
    momentum: float = 0.9
    weight_decay: float = Field(0.0, ge=0)


class HardwareConfig(_Strict):
    technology: Literal["memristor", "eflash"] = "memristor"
    scheme: Literal["map1", "map2"] = "map1"


class FitConfig(_Strict):
    measurements: str
    shape: Literal["temp_memristor", "temp_eflash", "nl_memristor", "nl_eflash", "switch_set", "switch_reset"]
    init: Optional[dict[str, float]] = None
    x_tune: float = 0.6
    t0: float = 25.0
    max_iter: int = Field(200, ge=1)
    fitted_at: Optional[str] = None


class TuneConfig(_Strict):
    rows: int = Field(64, ge=1)
    cols: int = Field(64, ge=1)
    sigma_alpha: float = Field(0.25, ge=0, lt=1)
    approaches: list[Literal["naive", "approach1", "approach2"]] = ["naive", "approach1", "approach2"]
    rounds: int = Field(10, ge=1)
    v_step: float = Field(0.1, gt=0)
    target_rel_error: float = Field(0.01, gt=0, lt=1)
    threshold: float = Field(0.05, gt=0)
    cap_schedule_set: Optional[list[float]] = None
    cap_schedule_reset: Optional[list[float]] = None


class FaultsConfig(_Strict):
    ppm: list[float] = [2e4]
    mix: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    approaches: list[Literal["none", "retune", "retune+column"]] = ["none", "retune", "retune+column"]
    hardware: HardwareConfig = HardwareConfig()
    network: NetworkConfig = NetworkConfig()
    dataset: DatasetConfig = DatasetConfig()
    train_seed: int = 0
    calibration_samples: int = Field(256, ge=1)

    @field_validator("ppm")
    @classmethod
    def _ppm_range(cls, v):
        if any(not 0 <= p <= 1e6 for p in v):
            raise ValueError("ppm values must lie in [0, 1e6]")
        return v

    @field_validator("mix")
    @classmethod
    def _mix_sum(cls, v):
        if any(m < 0 for m in v) or abs(sum(v) - 1) > 1e-9:
            raise ValueError("mix must be non-negative and sum to 1")
        return v


class NoiseConfig(_Strict):
    mode: Literal["sweep", "layer", "optimize"] = "sweep"
    rho: list[float] = [1e-3, 1e-2, 1e-1, 1.0]
    a: float = Field(2.0, gt=1)
    max_iters: int = Field(10, ge=1)
    eval_samples: int = Field(2000, ge=1)
    clip: bool = False
    hardware: HardwareConfig = HardwareConfig()
    network: NetworkConfig = NetworkConfig()
    dataset: DatasetConfig = DatasetConfig()
    train_seed: int = 0

    @field_validator("rho")
    @classmethod
    def _rho_positive(cls, v):
        if not v or any(r <= 0 for r in v):
            raise ValueError("rho values must be positive")
        return v


class ThermalConfig(_Strict):
    approaches: list[Literal["baseline", "1", "1+2", "1+2+3"]] = ["baseline", "1", "1+2", "1+2+3"]
    k: int = Field(4, ge=1)
    temperatures: list[float] = [25, 35, 45, 55, 65, 75, 85, 95, 100]
    hardware: HardwareConfig = HardwareConfig()
    network: NetworkConfig = NetworkConfig()
    dataset: DatasetConfig = DatasetConfig()

    @field_validator("temperatures")
    @classmethod
    def _temps(cls, v):
        if not v or any(not 0 <= t <= 120 for t in v):
            raise ValueError("temperatures must lie in [0, 120] degC")
        return v


class TrainConfig(_Strict):
    network: NetworkConfig = NetworkConfig()
    dataset: DatasetConfig = DatasetConfig()


class RetentionConfig(_Strict):
    t_elapsed: float = Field(ge=0)
    t_bake: float = Field(gt=-273.15)
    t_target: float = Field(gt=-273.15)
    ea: float = Field(1.1, ge=0)


SUBCONFIGS = {"fit": FitConfig, "tune": TuneConfig, "faults": FaultsConfig, "noise": NoiseConfig,
              "thermal": ThermalConfig, "train": TrainConfig, "retention": RetentionConfig}


class ExperimentConfig(_Strict):
    version: int
    kind: Literal["fit", "tune", "faults", "noise", "thermal", "train", "retention"]
    seeds: list[int] = [0]
    output: Optional[str] = None
    fit: Optional[FitConfig] = None
    tune: Optional[TuneConfig] = None
    faults: Optional[FaultsConfig] = None
    noise: Optional[NoiseConfig] = None
    thermal: Optional[ThermalConfig] = None
    train: Optional[TrainConfig] = None
    retention: Optional[RetentionConfig] = None

    @field_validator("version")
    @classmethod
    def _version(cls, v):
        if v != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {v} (expected {CONFIG_VERSION})")
        return v

    @model_validator(mode="after")
    def _sections(self):
        for k in KINDS:
            if k != self.kind and getattr(self, k) is not None:
                raise ValueError(f"section {k!r} given for a {self.kind!r} experiment")
        if getattr(self, self.kind) is None:
            if self.kind in ("fit", "retention"):
                raise ValueError(f"missing section {self.kind!r}")
            object.__setattr__(self, self.kind, SUBCONFIGS[self.kind]())
        if not self.seeds:
            raise ValueError("seeds must not be empty")
        return self

    @property
    def section(self):
        return getattr(self, self.kind)

    def canonical(self) -> dict:
        return self.model_dump(mode="json", exclude_none=True)

    def digest(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _path(loc) -> str:
    return ".".join(str(p) for p in loc) or "<root>"


def parse_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        errors = []
        for e in exc.errors():
            msg = e["msg"]
            if e["type"] == "extra_forbidden":
                msg = f"unknown field {e['loc'][-1]!r}"
            errors.append((_path(e["loc"]), msg))
        raise ConfigError(errors) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError([("<file>", f"config file {path} not found")]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([("<file>", f"invalid JSON at line {exc.lineno}: {exc.msg}")]) from None
    if not isinstance(data, dict):
        raise ConfigError([("<root>", "config must be a JSON object")])
    return parse_config(data)
