"""Run configuration with a versioned JSON schema."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

from .model import ModelConfig

SCHEMA_VERSION = 1
MODES = ("c2a_full", "lambda_c_zero", "target_only", "finetune")


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class TrainConfig:
    schema_version: int = SCHEMA_VERSION
    mode: str = "c2a_full"
    seed: int = 0
    max_iter: int = 2000
    eval_interval: int = 250
    checkpoint_interval: int = 0
    batch_source: int = 4
    batch_target: int = 4
    batch_bridge: int = 4
    batch_unlabeled: int = 4
    # desk-scale rates; the full-size values are 2.5e-4 / 2.5e-5 / 1e-4
    lr_backbone: float = 2.5e-2
    lr_centers: float = 2.5e-3
    lr_disc: float = 1e-2
    power: float = 0.9
    lambda_adv: float = 0.001
    disable_kl: bool = False
    pretrain_iters: int = 500
    kmeans_max_iter: int = 300
    # network shape
    stride: int = 4
    hidden: int = 32
    f_d: int = 32
    f_e: int = 16
    K: int = 10
    temperature: float = 1.0
    leaky_slope: float = 0.2
    disc_channels: list = field(default_factory=lambda: [16, 16, 16, 16])

    def validate(self) -> None:
        problems = []
        if self.schema_version != SCHEMA_VERSION:
            problems.append(f"schema_version: expected {SCHEMA_VERSION}, got {self.schema_version}")
        if self.mode not in MODES:
            problems.append(f"mode: must be one of {', '.join(MODES)}, got {self.mode!r}")
        for name in ("max_iter", "pretrain_iters", "checkpoint_interval"):
            if getattr(self, name) < 0:
                problems.append(f"{name}: must be >= 0")
        for name in ("eval_interval", "batch_source", "batch_target", "batch_bridge",
                     "batch_unlabeled", "stride", "hidden", "f_d", "f_e", "K",
                     "kmeans_max_iter"):
            if getattr(self, name) < 1:
                problems.append(f"{name}: must be >= 1")
        for name in ("lr_backbone", "lr_centers", "lr_disc", "lambda_adv", "power"):
            if getattr(self, name) < 0:
                problems.append(f"{name}: must be >= 0")
        if self.temperature <= 0:
            problems.append("temperature: must be > 0")
        if not (0.0 < self.leaky_slope < 1.0):
            problems.append("leaky_slope: must be in (0, 1)")
        if self.f_e > self.f_d:
            problems.append("f_e: must be <= f_d")
        if problems:
            raise ConfigError(problems)

    def model_config(self, height: int, width: int, n_src: int, n_tgt: int) -> ModelConfig:
        return ModelConfig(
            height=height,
            width=width,
            stride=self.stride,
            hidden=self.hidden,
            f_d=self.f_d,
            f_e=self.f_e,
            K=self.K,
            n_source_classes=n_src,
            n_target_classes=n_tgt,
            slope=self.leaky_slope,
            disc_channels=list(self.disc_channels),
            temperature=self.temperature,
        )

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        problems = [f"{k}: unknown key" for k in sorted(set(d) - set(fields))]
        kw = {}
        for k, v in d.items():
            if k not in fields:
                continue
            default = getattr(cls(), k)
            if isinstance(default, bool):
                ok = isinstance(v, bool)
            elif isinstance(default, int):
                ok = isinstance(v, int) and not isinstance(v, bool)
            elif isinstance(default, float):
                ok = isinstance(v, (int, float)) and not isinstance(v, bool)
            elif isinstance(default, list):
                ok = isinstance(v, list) and all(isinstance(x, int) for x in v)
            else:
                ok = isinstance(v, type(default))
            if not ok:
                problems.append(f"{k}: expected {type(default).__name__}, got {type(v).__name__}")
            else:
                kw[k] = float(v) if isinstance(default, float) else v
        cfg = cls(**kw)
        try:
            cfg.validate()
        except ConfigError as e:
            problems += e.problems
        if problems:
            raise ConfigError(problems)
        return cfg


def load_config(path: str | os.PathLike | None, overrides: dict | None = None) -> TrainConfig:
    data = {}
    if path is not None:
        with open(path) as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ConfigError(["<root>: config must be a JSON object"])
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return TrainConfig.from_json(data)
