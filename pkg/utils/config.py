"""
Typed run configuration.

Every schedule and hyper-parameter of a run lives in one `TrainConfig`. Defaults are
the published CIFAR recipe; `scale.factor` shrinks step and epoch counts together so
desk-scale runs keep the same number of learning-rate decays.
"""

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from utils.errors import ConfigError
from utils.helpers import canonical_json, scaled_count, sha256_hex

DEFAULT_LAMBDA_LOW = 0.75
DEFAULT_LAMBDA_HIGH = 0.95


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelConfig(_Section):
    arch: Literal["resnet8", "resnet20"] = "resnet8"
    num_classes: int = Field(10, ge=2)
    width_mult: float = Field(1.0, gt=0)
    image_size: int = Field(32, ge=4, le=32)


class DatasetSource(_Section):
    """Where images come from and how pixels map to [-1, 1]."""

    kind: Literal["cifar10-binary", "cifar100-binary", "toy-blobs", "dumped-synthetic"] = "toy-blobs"
    path: Optional[str] = None
    split: Literal["train", "test"] = "train"
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.5, 0.5, 0.5)
    # toy-blobs only
    per_class: int = Field(200, ge=1)
    test_per_class: int = Field(50, ge=1)

    @field_validator("std")
    @classmethod
    def _std_positive(cls, v):
        if any(s <= 0 for s in v):
            raise ValueError("normalization std must be positive")
        return v

    @model_validator(mode="after")
    def _path_required(self):
        if self.kind != "toy-blobs" and not self.path:
            raise ValueError(f"data.path is required for kind '{self.kind}'")
        return self


class PretrainConfig(_Section):
    epochs: int = Field(5, ge=1)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(0.05, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(5e-4, ge=0)
    lr_decay: float = Field(0.1, gt=0, le=1)
    decay_every: int = Field(1000, ge=1)


class GenerationConfig(_Section):
    lr: float = Field(0.5, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    lr_decay: float = Field(0.1, gt=0, le=1)
    decay_every: int = Field(1000, ge=1)
    batch_size: int = Field(256, ge=1)
    total_steps: int = Field(4000, ge=1)
    label_policy: Literal["uniform", "balanced"] = "balanced"


class FinetuneConfig(_Section):
    lr: float = Field(1e-4, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(1e-4, ge=0)
    epochs: int = Field(150, ge=1)
    lr_decay: float = Field(0.1, gt=0, le=1)
    decay_every_epochs: int = Field(100, ge=1)
    batch_size: int = Field(256, ge=1)
    steps_per_epoch: int = Field(200, ge=1)
    act_warmup_batches: int = Field(20, ge=1)
    distill: Literal["dkd", "kd"] = "dkd"
    alternate_generator: bool = False
    prefetch: bool = False


class QuantConfig(_Section):
    weight_bits: int = Field(4, ge=2, le=8)
    act_bits: int = Field(4, ge=2, le=8)
    per_channel: bool = False
    drop_offset_dequant: bool = False
    act_ema_momentum: float = Field(0.9, gt=0, lt=1)


class AblationFlags(_Section):
    lrg_on: bool = True
    ama_on: bool = True
    dkd_on: bool = True


class HyperParams(_Section):
    K: int = Field(21, ge=1)
    d: int = Field(3, ge=1)
    margin: float = Field(0.6, ge=0)
    kd_lambda: float = Field(0.9, ge=0)
    lambda_low: Optional[float] = Field(None, ge=-1, le=1)
    lambda_high: Optional[float] = Field(None, ge=-1, le=1)
    alpha_dkd: float = Field(1.0, ge=0)
    beta_dkd: float = Field(8.0, ge=0)
    temperature: float = Field(1.0, gt=0)
    center_mode: Literal["batch", "ema"] = "batch"
    center_decay: float = Field(0.9, gt=0, lt=1)


class GeneratorConfig(_Section):
    noise_dim: int = Field(100, ge=1)
    base_channels: int = Field(128, ge=1)
    lra_positions: tuple[int, ...] = (0, 1)
    sigmoid_gate: bool = False
    bottleneck_ratio: float = Field(1.0, gt=0, le=1)


class ScaleConfig(_Section):
    factor: float = Field(1.0, gt=0)
    batch_size: Optional[int] = Field(None, ge=1)


class TrainConfig(_Section):
    seed: int = 0
    strict: bool = False
    model: ModelConfig = ModelConfig()
    data: DatasetSource = DatasetSource()
    pretrain: PretrainConfig = PretrainConfig()
    generation: GenerationConfig = GenerationConfig()
    finetune: FinetuneConfig = FinetuneConfig()
    quant: QuantConfig = QuantConfig()
    ablation: AblationFlags = AblationFlags()
    hyper: HyperParams = HyperParams()
    generator: GeneratorConfig = GeneratorConfig()
    scale: ScaleConfig = ScaleConfig()

    @model_validator(mode="after")
    def _check_bounds(self):
        if self.strict and (self.hyper.lambda_low is None or self.hyper.lambda_high is None):
            raise ValueError("strict mode requires hyper.lambda_low and hyper.lambda_high")
        low, high = self.ama_bounds()
        if not low < high:
            raise ValueError(f"hyper.lambda_low ({low}) must be below hyper.lambda_high ({high})")
        return self

    def ama_bounds(self):
        low = DEFAULT_LAMBDA_LOW if self.hyper.lambda_low is None else self.hyper.lambda_low
        high = DEFAULT_LAMBDA_HIGH if self.hyper.lambda_high is None else self.hyper.lambda_high
        return low, high

    # Effective (desk-scaled) schedule values

    def gen_steps(self):
        return scaled_count(self.generation.total_steps, self.scale.factor)

    def gen_decay_every(self):
        return scaled_count(self.generation.decay_every, self.scale.factor)

    def gen_batch_size(self):
        return self.scale.batch_size or self.generation.batch_size

    def ft_epochs(self):
        return scaled_count(self.finetune.epochs, self.scale.factor)

    def ft_decay_every(self):
        return scaled_count(self.finetune.decay_every_epochs, self.scale.factor)

    def ft_batch_size(self):
        return self.scale.batch_size or self.finetune.batch_size


def _apply_override(payload, dotted_key, value):
    node = payload
    parts = dotted_key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"Cannot override '{dotted_key}': '{part}' is not a section")
    node[parts[-1]] = value


def load_config(path=None, overrides=None):
    """
    Load and validate a run configuration.

    Args:
        path: JSON config file; None means all defaults.
        overrides: Mapping of dotted keys (e.g. "quant.weight_bits") to values, applied
            before validation so they are part of the canonical hash.
    """
    payload = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        try:
            payload = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
        if not isinstance(payload, dict):
            raise ConfigError(f"Config file {path} must hold a JSON object")
    for key, value in (overrides or {}).items():
        if value is not None:
            _apply_override(payload, key, value)
    try:
        return TrainConfig.model_validate(payload)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


def config_hash(cfg):
    """SHA-256 of the canonical JSON form of a validated config."""
    return sha256_hex(canonical_json(cfg.model_dump(mode="json")))


def with_overrides(cfg, overrides):
    """Return a re-validated copy of `cfg` with dotted-key overrides applied."""
    payload = cfg.model_dump(mode="json")
    for key, value in overrides.items():
        _apply_override(payload, key, value)
    try:
        return TrainConfig.model_validate(payload)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e
