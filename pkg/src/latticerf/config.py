"""Configuration dataclasses, JSON loading and config hashing."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Invalid configuration or input dimensions."""


@dataclass(frozen=True)
class EncodingConfig:
    """Trigonometric positional encoding.

    ``mode="additive"`` evaluates ``sin(alpha*p + beta**(j/C))`` exactly as the
    method is usually written; ``mode="divisive"`` uses the multi-frequency
    ``sin(alpha*p / beta**(6j/C))`` variant.
    """

    C: int = 36
    alpha: float = 100.0
    beta: float = 1000.0
    mode: str = "additive"

    def __post_init__(self):
        if self.C <= 0 or self.C % 6:
            raise ConfigError(f"encoding dimensionality C must be a positive multiple of 6, got {self.C}")
        if self.mode not in ("additive", "divisive"):
            raise ConfigError(f"unknown encoding mode {self.mode!r}")


@dataclass(frozen=True)
class LossConfig:
    lambda_color: float = 1.0
    lambda_reg: float = 0.01
    tau: float = 0.5 * math.log(2.0)
    epsilon: float = 1e-8

    def __post_init__(self):
        for name in ("lambda_color", "lambda_reg", "tau", "epsilon"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite")
        if self.lambda_color < 0 or self.lambda_reg < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")


@dataclass(frozen=True)
class ModelConfig:
    mlp_width: int = 128
    n_res_blocks: int = 4
    feature_channels: int = 32
    density_activation: str = "softplus"
    density_scale: float = 1.0

    def __post_init__(self):
        if self.density_activation not in ("softplus", "relu"):
            raise ConfigError(f"unknown density activation {self.density_activation!r}")
        if min(self.mlp_width, self.n_res_blocks, self.feature_channels) <= 0:
            raise ConfigError("model sizes must be positive")


@dataclass(frozen=True)
class TrainConfig:
    coarse_resolution: int = 63
    fine_resolution: int = 125
    rays_per_image: int = 256
    samples_coarse: int = 32
    samples_fine: int = 64
    views_per_scene_per_epoch: int = 4
    lr: float = 1e-4
    batch_size: int = 1
    k: int = 4
    nbr_radius_factor: float = 3.0
    coarse_steps: int = 2000
    fine_steps: int = 4000
    seed: int = 0
    splat_sigma_px: float = 1.0
    background: tuple = (0.0, 0.0, 0.0)
    grad_clip: float = 10.0
    transmittance_samples: int = 32
    log_every: int = 1
    loss: LossConfig = field(default_factory=LossConfig)
    encoding: EncodingConfig = field(default_factory=EncodingConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        counts = ("coarse_resolution", "fine_resolution", "rays_per_image", "samples_coarse",
                  "samples_fine", "views_per_scene_per_epoch", "batch_size", "k", "transmittance_samples")
        for name in counts:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.coarse_steps < 0 or self.fine_steps < 0:
            raise ConfigError("step counts must be non-negative")
        if self.lr < 0 or not math.isfinite(self.lr):
            raise ConfigError("lr must be finite and non-negative")
        if self.batch_size != 1:
            raise ConfigError("only batch_size=1 (one scene/target view per step) is supported")
        if self.coarse_resolution < 2 or self.fine_resolution < 2:
            raise ConfigError("lattice resolutions must be >= 2")
        object.__setattr__(self, "background", tuple(float(c) for c in self.background))

    def neighbor_radius(self, resolution: int) -> float:
        return self.nbr_radius_factor * 2.0 / (resolution - 1)


_NESTED = {"loss": LossConfig, "encoding": EncodingConfig, "model": ModelConfig}


def to_dict(cfg) -> dict:
    d = dataclasses.asdict(cfg)
    if "background" in d:
        d["background"] = list(d["background"])
    return d


def from_dict(data: dict) -> TrainConfig:
    """Build a TrainConfig, rejecting unknown keys at every level."""
    data = dict(data)
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key, cls in _NESTED.items():
        if key in data:
            sub = dict(data[key])
            sub_known = {f.name for f in dataclasses.fields(cls)}
            bad = set(sub) - sub_known
            if bad:
                raise ConfigError(f"unknown keys in {key!r}: {sorted(bad)}")
            data[key] = cls(**sub)
    if "background" in data:
        data["background"] = tuple(data["background"])
    try:
        return TrainConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def config_hash(cfg: TrainConfig) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_run_config(path) -> tuple[TrainConfig, dict]:
    """Read a run config file: TrainConfig fields plus optional ``dataset``/``out_dir`` paths."""
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    extras = {k: raw.pop(k) for k in ("dataset", "out_dir") if k in raw}
    return from_dict(raw), extras
