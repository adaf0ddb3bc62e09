"""
Configuration management for plm-kit.

Uses stdlib dataclasses, one per concern. Reads from config.toml, the
PLM_KIT_CONFIG environment variable and dotted CLI overrides. Unknown keys
are rejected; the resolved RunConfig is snapshotted into every report,
checkpoint and manifest.
"""

from __future__ import annotations

import dataclasses
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from plm_kit.errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    try:
        import tomli as tomllib
    except ImportError:
        tomllib = None


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


# ── Model architectures ───────────────────────────────────


@dataclass
class EncoderConfig:
    """Masked-LM encoder. Defaults are the desk-scale configuration."""
    num_layers: int = 2
    num_heads: int = 4
    hidden_dim: int = 64
    ffn_dim: int = 256
    max_len: int = 128
    vocab_size: int = 30
    dropout_rate: float = 0.1
    seed: int = 0

    def validate(self) -> EncoderConfig:
        for name in ("num_layers", "num_heads", "hidden_dim", "ffn_dim", "max_len"):
            _require(getattr(self, name) > 0, f"encoder.{name} must be positive")
        _require(
            self.hidden_dim % self.num_heads == 0,
            f"encoder.hidden_dim ({self.hidden_dim}) must be divisible by "
            f"encoder.num_heads ({self.num_heads})",
        )
        _require(self.max_len >= 3, "encoder.max_len must be at least 3")
        _require(self.vocab_size == 30, "encoder.vocab_size is fixed at 30")
        _require(0.0 <= self.dropout_rate < 1.0, "encoder.dropout_rate must be in [0, 1)")
        return self


@dataclass
class DecoderConfig:
    """Latent-conditioned autoregressive decoder."""
    num_layers: int = 2
    num_heads: int = 4
    hidden_dim: int = 64
    ffn_dim: int = 256
    z_dim: int = 32
    max_len: int = 128
    dropout_rate: float = 0.0
    seed: int = 0

    def validate(self) -> DecoderConfig:
        for name in ("num_layers", "num_heads", "hidden_dim", "ffn_dim", "z_dim", "max_len"):
            _require(getattr(self, name) > 0, f"decoder.{name} must be positive")
        _require(
            self.hidden_dim % self.num_heads == 0,
            f"decoder.hidden_dim ({self.hidden_dim}) must be divisible by "
            f"decoder.num_heads ({self.num_heads})",
        )
        _require(self.max_len >= 3, "decoder.max_len must be at least 3")
        _require(0.0 <= self.dropout_rate < 1.0, "decoder.dropout_rate must be in [0, 1)")
        return self


# ── Training ──────────────────────────────────────────────


@dataclass
class MaskingPolicy:
    """BERT-style corruption: select 15%, then 80/10/10 mask/random/keep."""
    select_rate: float = 0.15
    mask_rate: float = 0.8
    random_rate: float = 0.1
    keep_rate: float = 0.1
    seed: int = 0

    def validate(self) -> MaskingPolicy:
        _require(0.0 <= self.select_rate < 1.0, "masking.select_rate must be in [0, 1)")
        for name in ("mask_rate", "random_rate", "keep_rate"):
            _require(getattr(self, name) >= 0.0, f"masking.{name} must be non-negative")
        total = self.mask_rate + self.random_rate + self.keep_rate
        _require(
            math.isclose(total, 1.0, abs_tol=1e-9),
            f"masking rates must sum to 1 (got {total})",
        )
        return self


@dataclass
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> OptimizerConfig:
        _require(0.0 <= self.beta1 < 1.0, "optimizer.beta1 must be in [0, 1)")
        _require(0.0 <= self.beta2 < 1.0, "optimizer.beta2 must be in [0, 1)")
        _require(self.eps > 0.0, "optimizer.eps must be positive")
        return self


@dataclass
class PretrainConfig:
    steps: int = 1000
    batch_size: int = 16
    lr: float = 1e-3
    holdout_fraction: float = 0.1
    eval_rounds: int = 3

    def validate(self) -> PretrainConfig:
        _require(self.steps >= 0, "pretrain.steps must be non-negative")
        _require(self.batch_size > 0, "pretrain.batch_size must be positive")
        _require(self.lr > 0.0, "pretrain.lr must be positive")
        _require(0.0 <= self.holdout_fraction < 1.0, "pretrain.holdout_fraction must be in [0, 1)")
        _require(self.eval_rounds > 0, "pretrain.eval_rounds must be positive")
        return self


@dataclass
class FinetuneConfig:
    """Task fine-tuning. head_hidden = 0 means hidden width equals encoder hidden_dim."""
    epochs: int = 20
    batch_size: int = 16
    head_lr: float = 1e-3
    encoder_lr: float = 1e-4
    freeze_encoder: bool = False
    head_hidden: int = 0

    def validate(self) -> FinetuneConfig:
        _require(self.epochs >= 0, "finetune.epochs must be non-negative")
        _require(self.batch_size > 0, "finetune.batch_size must be positive")
        _require(self.head_lr > 0.0, "finetune.head_lr must be positive")
        _require(self.encoder_lr > 0.0, "finetune.encoder_lr must be positive")
        _require(self.head_hidden >= 0, "finetune.head_hidden must be non-negative")
        return self


@dataclass
class VaeTrainConfig:
    """Decoder training. corpus_cap bounds how many corpus sequences one epoch sees."""
    epochs: int = 5
    corpus_cap: int = 2000
    kl_weight: float = 0.1
    warmup_fraction: float = 0.2
    lr: float = 1e-3
    batch_size: int = 16

    def validate(self) -> VaeTrainConfig:
        _require(self.epochs >= 0, "vae.epochs must be non-negative")
        _require(self.corpus_cap > 0, "vae.corpus_cap must be positive")
        _require(self.kl_weight >= 0.0, "vae.kl_weight (beta) must be non-negative")
        _require(0.0 <= self.warmup_fraction <= 1.0, "vae.warmup_fraction must be in [0, 1]")
        _require(self.lr > 0.0, "vae.lr must be positive")
        _require(self.batch_size > 0, "vae.batch_size must be positive")
        return self


# ── Generation ────────────────────────────────────────────


SAMPLING_MODES = ("greedy", "temperature")


@dataclass
class GenerationConfig:
    sigma: float = 0.0
    num_samples: int = 1
    sampling: str = "greedy"
    temperature: float = 1.0
    max_len: int = 128
    seed: int = 0
    allow_untrained: bool = False

    def validate(self) -> GenerationConfig:
        _require(self.sigma >= 0.0, "generation.sigma must be non-negative")
        _require(self.num_samples > 0, "generation.num_samples must be positive")
        _require(
            self.sampling in SAMPLING_MODES,
            f"generation.sampling must be one of {', '.join(SAMPLING_MODES)}",
        )
        _require(self.temperature > 0.0, "generation.temperature must be positive")
        _require(self.max_len >= 1, "generation.max_len must be at least 1")
        return self


@dataclass
class CampaignConfig:
    """Seed-based generation sweep. Campaigns sample with temperature by default."""
    sigma_grid: list[float] = field(default_factory=lambda: [0.0, 0.5, 1.0, 2.0])
    n_per_sigma: int = 20
    sampling: str = "temperature"
    temperature: float = 1.0
    finetune_seed_epochs: int = 20

    def validate(self) -> CampaignConfig:
        _require(len(self.sigma_grid) > 0, "campaign.sigma_grid must not be empty")
        _require(all(s >= 0.0 for s in self.sigma_grid), "campaign.sigma_grid values must be >= 0")
        _require(self.n_per_sigma > 0, "campaign.n_per_sigma must be positive")
        _require(
            self.sampling in SAMPLING_MODES,
            f"campaign.sampling must be one of {', '.join(SAMPLING_MODES)}",
        )
        _require(self.temperature > 0.0, "campaign.temperature must be positive")
        _require(self.finetune_seed_epochs >= 0, "campaign.finetune_seed_epochs must be >= 0")
        return self


@dataclass
class PathsConfig:
    output_dir: str = "./runs"
    log_every: int = 50

    def validate(self) -> PathsConfig:
        _require(self.log_every > 0, "paths.log_every must be positive")
        return self


# ── Root config ───────────────────────────────────────────

_SECTIONS: dict[str, type] = {
    "encoder": EncoderConfig,
    "masking": MaskingPolicy,
    "optimizer": OptimizerConfig,
    "pretrain": PretrainConfig,
    "finetune": FinetuneConfig,
    "decoder": DecoderConfig,
    "vae": VaeTrainConfig,
    "generation": GenerationConfig,
    "campaign": CampaignConfig,
    "paths": PathsConfig,
}


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    masking: MaskingPolicy = field(default_factory=MaskingPolicy)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    vae: VaeTrainConfig = field(default_factory=VaeTrainConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    campaign: CampaignConfig = field(default_factory=CampaignConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = 0

    @staticmethod
    def resolve_path(config_path: Optional[str] = None) -> Optional[Path]:
        """The config file ``load`` would read, or None for pure defaults."""
        if config_path is not None:
            return Path(config_path)
        if "PLM_KIT_CONFIG" in os.environ:
            return Path(os.environ["PLM_KIT_CONFIG"])
        default = Path("config.toml")
        return default if default.exists() else None

    @classmethod
    def load(cls, config_path: Optional[str] = None, **overrides) -> RunConfig:
        data: dict = {}
        path = cls.resolve_path(config_path)
        if path is not None:
            if not path.exists():
                raise ConfigError(f"Config file not found: {path}")
            if tomllib is None:
                raise ConfigError("tomli is required to read config files on Python < 3.11")
            with open(path, "rb") as f:
                try:
                    data = tomllib.load(f)
                except tomllib.TOMLDecodeError as e:
                    raise ConfigError(f"{path}: {e}") from e
        for key, val in overrides.items():
            if val is not None:
                _nested_set(data, key, val)
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        kwargs: dict[str, Any] = {}
        for key, value in data.items():
            if key == "seed":
                if not isinstance(value, int) or isinstance(value, bool):
                    raise ConfigError("seed must be an integer")
                kwargs["seed"] = value
                continue
            klass = _SECTIONS.get(key)
            if klass is None:
                raise ConfigError(f"Unknown config key: {key}")
            if not isinstance(value, dict):
                raise ConfigError(f"Config section [{key}] must be a table")
            kwargs[key] = _build_section(key, klass, value)
        return cls(**kwargs).validate()

    def validate(self) -> RunConfig:
        for name in _SECTIONS:
            getattr(self, name).validate()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_toml_string(self) -> str:
        lines = [
            "# plm-kit configuration",
            "# Every key is optional; omitted keys take the documented defaults.",
            "",
            f"seed = {self.seed}",
        ]
        for name in _SECTIONS:
            section = getattr(self, name)
            lines += ["", f"[{name}]"]
            for f in dataclasses.fields(section):
                lines.append(f"{f.name} = {_toml_value(getattr(section, f.name))}")
        return "\n".join(lines) + "\n"


def _build_section(name: str, klass: type, values: dict):
    known = {f.name: f for f in dataclasses.fields(klass)}
    defaults = klass()
    kwargs = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"Unknown config key: {name}.{key}")
        kwargs[key] = _coerce(f"{name}.{key}", getattr(defaults, key), value)
    return klass(**kwargs)


def _coerce(key: str, default: Any, value: Any) -> Any:
    """Match the type of the documented default; ints are accepted for floats."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string")
        return value
    if isinstance(default, list):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key} must be a list")
        try:
            return [float(v) for v in value]
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{key} must be a list of numbers") from e
    return value


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, str):
        return f'"{value}"'
    if isinstance(value, list):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    return repr(value)


def _nested_set(d: dict, key: str, value):
    parts = key.split(".")
    for part in parts[:-1]:
        d = d.setdefault(part, {})
    d[parts[-1]] = value
