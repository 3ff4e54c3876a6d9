"""Run configuration: one nested JSON document, every knob a named key.

Defaults follow the traffic-scale settings: 5-minute cadence, 6-hour
context, 1-hour prediction and stride, two LSTM layers of 128/64 units,
five coupling blocks with 128-wide two-layer st-networks, 300-epoch cap
with batch 64 and a 30% validation split.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class ClusterSection:
    sample_size: int = 100
    min_pts: int = 5
    xi: float = 0.05
    week_start: int = 0
    band: int | None = None


@dataclass
class WindowSection:
    context_len: int = 72
    pred_len: int = 12
    stride: int = 12


@dataclass
class ModelSection:
    hidden: list[int] = field(default_factory=lambda: [128, 64])
    n_blocks: int = 5
    st_hidden: int = 128
    st_layers: int = 2


@dataclass
class TrainSection:
    max_epochs: int = 300
    batch_size: int = 64
    learning_rate: float = 1e-3
    val_fraction: float = 0.3
    patience: int = 10
    clip_norm: float = 5.0


@dataclass
class ThresholdSection:
    mode: str = "static"  # "static" | "spot"
    prefix_frac: float = 0.3  # static: labeled prefix fraction
    grid_size: int = 200
    q: float = 1e-4  # spot risk
    level: float = 0.98  # spot initial-threshold quantile
    n_init: int = 1000  # spot initialization batch


@dataclass
class DiagnosisSection:
    sigma_steps: int = 12
    validation_frac: float = 0.25


@dataclass
class SynthSection:
    alpha: float = 0.05
    beta: float = 0.5
    slice_len: int = 6
    steps: int = 8640  # one month at 5-minute cadence


@dataclass
class EvalSection:
    alphas: list[float] = field(default_factory=lambda: [0.05, 0.03, 0.01])
    betas: list[float] = field(default_factory=lambda: [1.0, 0.5, 0.25])
    replicates: int = 5
    test_fraction: float = 0.1
    ar_lag: int = 12


@dataclass
class RunConfig:
    seed: int = 0
    cluster: ClusterSection = field(default_factory=ClusterSection)
    window: WindowSection = field(default_factory=WindowSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    threshold: ThresholdSection = field(default_factory=ThresholdSection)
    diagnosis: DiagnosisSection = field(default_factory=DiagnosisSection)
    synth: SynthSection = field(default_factory=SynthSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> None:
        if self.threshold.mode not in ("static", "spot"):
            raise ConfigError("threshold.mode must be 'static' or 'spot'")
        if not 0 < self.train.val_fraction < 1:
            raise ConfigError("train.val_fraction must lie in (0, 1)")
        if not 0 < self.threshold.prefix_frac < 1:
            raise ConfigError("threshold.prefix_frac must lie in (0, 1)")
        if not 0 < self.threshold.q < 1 - self.threshold.level:
            raise ConfigError("threshold.q must lie in (0, 1 - threshold.level)")
        if not 0 < self.cluster.xi < 1:
            raise ConfigError("cluster.xi must lie in (0, 1)")
        if min(self.window.context_len, self.window.pred_len, self.window.stride) < 1:
            raise ConfigError("window lengths and stride must be >= 1")
        if not 0 <= self.synth.alpha <= 1 or not 0 <= self.synth.beta <= 1:
            raise ConfigError("synth.alpha and synth.beta must lie in [0, 1]")
        if self.model.n_blocks < 1 or not self.model.hidden:
            raise ConfigError("model needs at least one coupling block and one layer")

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {f.name: f for f in fields(RunConfig) if f.name != "seed"}


def config_from_dict(data: dict) -> RunConfig:
    cfg = RunConfig()
    for key, value in data.items():
        if key == "seed":
            cfg.seed = int(value)
            continue
        if key not in _SECTIONS:
            raise ConfigError(f"unknown section {key!r}")
        section = getattr(cfg, key)
        known = {f.name for f in fields(section)}
        for name, v in value.items():
            if name not in known:
                raise ConfigError(f"unknown key {key}.{name}")
            setattr(section, name, v)
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return config_from_dict(data)


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
