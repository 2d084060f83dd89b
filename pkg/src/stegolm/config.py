"""Run configuration: image geometry, model preset, stage hyperparameters.

Configs load from a declarative YAML (or JSON) file; every field has a
desk-scale default so a minimal file is enough to train the built-in tiny
model. The full-scale preset used for large backbones ships alongside as
``presets/full_scale.yaml`` for documentation.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass(frozen=True)
class Geometry:
    """Cover-image geometry: channels, height, width, patch size.

    The image splits into N = (H/P)*(W/P) patches of d_patch = C*P*P
    values each; N is also the number of secret-message embeddings.
    """

    channels: int = 3
    height: int = 64
    width: int = 64
    patch: int = 16

    def __post_init__(self):
        if self.patch <= 0:
            raise ConfigError(f"patch size must be positive, got {self.patch}")
        if self.height % self.patch or self.width % self.patch:
            raise ConfigError(
                f"height/width ({self.height}x{self.width}) must be divisible "
                f"by patch size {self.patch}"
            )
        if self.channels <= 0:
            raise ConfigError(f"channels must be positive, got {self.channels}")

    @property
    def n_patches(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def d_patch(self) -> int:
        return self.channels * self.patch * self.patch


@dataclass(frozen=True)
class ModelConfig:
    """Built-in tiny causal transformer dimensions."""

    preset: str = "tiny"
    d_emb: int = 128
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 512
    max_seq_len: int = 512
    base_vocab_size: int = 8000

    def __post_init__(self):
        if self.d_emb % self.n_heads:
            raise ConfigError("d_emb must be divisible by n_heads")


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    alpha: int = 32
    dropout: float = 0.1
    # attention query/key projections
    targets: tuple[str, ...] = ("q_proj", "k_proj")


@dataclass(frozen=True)
class StageConfig:
    """Hyperparameters for one training stage.

    Stage 1 trains the adapters, token embeddings, output head and both
    projectors without any cover image; Stage 2 freezes everything but
    the token-to-patch projector and introduces covers. lambda_emb and
    the mask ratio range only apply in Stage 1.
    """

    stage: int = 1
    steps: int = 1000
    batch_size: int = 16
    learning_rate: float = 2e-4
    weight_decay: float = 0.01
    warmup_steps: int = 500
    schedule: str = "cosine"
    lambda_text: float = 1.0
    lambda_emb: float = 1.0
    mask_ratio_range: tuple[float, float] = (0.0, 0.5)
    lora: LoraConfig = field(default_factory=LoraConfig)

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.schedule != "cosine":
            raise ConfigError(f"unsupported schedule {self.schedule!r}; only 'cosine' is implemented")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        lo, hi = self.mask_ratio_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise ConfigError(f"mask_ratio_range must satisfy 0 <= lo <= hi <= 1, got {self.mask_ratio_range}")
        if self.lambda_text < 0 or self.lambda_emb < 0:
            raise ConfigError("loss weights must be nonnegative")


@dataclass(frozen=True)
class RunConfig:
    """Top-level configuration for every CLI command."""

    seed: int = 0
    output_dir: str = "runs/out"
    geometry: Geometry = field(default_factory=Geometry)
    model: ModelConfig = field(default_factory=ModelConfig)
    stage1: StageConfig = field(default_factory=lambda: StageConfig(stage=1))
    stage2: StageConfig = field(default_factory=lambda: StageConfig(stage=2, lambda_emb=0.0))
    clamp: str = "hard"  # hard | none
    quantize_bits: int | None = None
    template_dir: str | None = None
    secrets_manifest: str | None = None
    covers_dir: str | None = None

    def __post_init__(self):
        if self.clamp not in ("hard", "none"):
            raise ConfigError(f"clamp must be 'hard' or 'none', got {self.clamp!r}")
        if self.quantize_bits is not None and not (1 <= self.quantize_bits <= 16):
            raise ConfigError(f"quantize_bits out of range: {self.quantize_bits}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, raw: dict, path_hint: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)} in {path_hint}")
    return cls(**raw)


def run_config_from_dict(raw: dict) -> RunConfig:
    raw = dict(raw)
    kw: dict = {}
    if "geometry" in raw:
        kw["geometry"] = _build(Geometry, raw.pop("geometry"), "geometry")
    if "model" in raw:
        kw["model"] = _build(ModelConfig, raw.pop("model"), "model")
    for name, stage_no in (("stage1", 1), ("stage2", 2)):
        if name in raw:
            sub = dict(raw.pop(name))
            sub.setdefault("stage", stage_no)
            if "mask_ratio_range" in sub:
                sub["mask_ratio_range"] = tuple(sub["mask_ratio_range"])
            if "lora" in sub:
                sub["lora"] = _build(LoraConfig, sub["lora"], f"{name}.lora")
            kw[name] = _build(StageConfig, sub, name)
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    kw.update(raw)
    return RunConfig(**kw)


def load_run_config(path: str | Path) -> RunConfig:
    """Load a RunConfig from a YAML/JSON file."""
    text = Path(path).read_text(encoding="utf-8")
    raw = yaml.safe_load(text)
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
    return run_config_from_dict(raw)
