"""Training configuration: a flat dataclass, ``key = value`` files, and a stable digest."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Mapping

from .damsm import MODES, Hyperparameters

# training-length keys do not change what a run computes per epoch, so resuming
# with a longer schedule keeps the same digest
_DIGEST_EXCLUDED = frozenset({"damsm_epochs", "stream_epochs", "gan_epochs", "checkpoint_every"})


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    mode: str = "attngan_baseline"
    seed: int = 0

    # data
    dataset_path: str = ""  # empty: generate the synthetic shapes set in memory
    synthetic_classes: int = 8
    synthetic_per_class: int = 64
    captions_per_image: int = 2
    resolutions: tuple[int, ...] = (16, 32, 64)
    t_max: int = 12
    crop_ratio: float = 0.75
    train_fraction: float = 0.75

    # text encoder
    provider: str = ""  # learned | hashed | precomputed; empty picks by mode
    provider_path: str = ""
    provider_dim: int = 32
    d_text: int = 32
    encoder_wiring: str = "rnn"
    sentence_pooling: str = "final"

    # generator / discriminators
    d_cond: int = 16
    d_z: int = 16
    gen_channels: int = 32
    n_res: int = 2
    gen_norm: str = "batch"
    disc_channels: int = 16
    mismatch_weight: float = 0.0
    kl_weight: float = 1.0

    # DAMSM
    region_edge: int = 8
    damsm_channels: int = 16
    gamma_region: float = 5.0
    gamma_score: float = 5.0
    gamma_batch: float = 10.0
    lam: float = 5.0

    # STREAM
    stream_hidden: int = 64
    stream_embed: int = 32
    stream_channels: int = 16
    stream_trainable: bool = False
    stream_lr_scale: float = 0.1
    lam_ce: float = -1.0  # negative: reuse lam
    ce_reduction: str = "batch_mean"

    # optimisation
    batch_size: int = 16
    lr: float = 2e-4
    damsm_lr: float = 2e-3
    stream_lr: float = 2e-3
    beta1: float = 0.5
    beta2: float = 0.999
    damsm_epochs: int = 200
    stream_epochs: int = 100
    gan_epochs: int = 100
    checkpoint_every: int = 25

    # evaluation
    is_per_class: int = 20
    eval_split: str = "test"

    def __post_init__(self):
        self.resolutions = tuple(int(r) for r in self.resolutions)
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in (0, 1)")
        if self.provider not in ("", "learned", "hashed", "precomputed"):
            raise ConfigError(f"unknown provider {self.provider!r}")
        if self.provider_kind == "precomputed" and not self.provider_path:
            raise ConfigError("precomputed provider needs provider_path")
        if self.eval_split not in ("train", "test", "all"):
            raise ConfigError(f"eval_split must be train, test or all, got {self.eval_split!r}")
        if self.checkpoint_every < 1 or self.batch_size < 2:
            raise ConfigError("checkpoint_every must be >= 1 and batch_size >= 2")
        for a, b in zip(self.resolutions, self.resolutions[1:]):
            if b != 2 * a:
                raise ConfigError(f"resolutions must double per stage, got {self.resolutions}")
        self.hyper  # noqa: B018 - validates gammas and lambda

    @property
    def provider_kind(self) -> str:
        if self.provider:
            return self.provider
        return "learned" if self.mode == "attngan_baseline" else "hashed"

    @property
    def hyper(self) -> Hyperparameters:
        try:
            return Hyperparameters(self.gamma_region, self.gamma_score, self.gamma_batch, self.lam)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def ce_weight(self) -> float:
        return self.lam if self.lam_ce < 0 else self.lam_ce

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def canonical(self, include_all: bool = False) -> str:
        lines = []
        for f in fields(self):
            if not include_all and f.name in _DIGEST_EXCLUDED:
                continue
            lines.append(f"{f.name}={format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(name: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


_DEFAULTS = {f.name: getattr(TrainConfig(), f.name) for f in fields(TrainConfig)}


def config_keys() -> list[str]:
    return list(_DEFAULTS)


def apply_overrides(config: TrainConfig, overrides: Mapping[str, str]) -> TrainConfig:
    changes = {}
    for key, raw in overrides.items():
        key = key.strip().replace("-", "_")
        if key not in _DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        changes[key] = _parse_value(key, raw, _DEFAULTS[key])
    return config.replace(**changes)


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path: str | Path | None = None, overrides: Mapping[str, str] | None = None) -> TrainConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (all as strings)."""
    config = TrainConfig()
    if path:
        config = apply_overrides(config, parse_config_text(Path(path).read_text()))
    if overrides:
        config = apply_overrides(config, overrides)
    return config


def write_config(config: TrainConfig, path: str | Path) -> Path:
    Path(path).write_text(config.canonical(include_all=True))
    return Path(path)
