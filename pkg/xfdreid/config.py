"""
Configuration Module
Run configuration dataclasses, presets and JSON/flag resolution
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, replace
from typing import Optional, Tuple

import numpy as np

from .exceptions import DegenerateKError, InvalidConfigError, XfdReidError


THREADS_ENV = "XFDREID_THREADS"
PRECISIONS = ("f32", "f64")
POOLING_MODES = ("mean", "attn")


@dataclass(frozen=True)
class LossWeights:
    """Weights of the identity, triplet and two cross-modal terms"""

    lambda_id: float = 0.25
    lambda_tri: float = 1.0
    lambda_i2t: float = 1.0
    lambda_t2i: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise InvalidConfigError(f"{name} must be >= 0, got {value}")

    def scaled(self, factor):
        return LossWeights(*(factor * v for v in asdict(self).values()))


@dataclass(frozen=True)
class ScheduleConfig:
    """Learning-rate schedule of one training stage"""

    base_lr: float = 2.0e-4
    min_lr: float = 2.0e-6
    warmup_epochs: int = 5
    warmup_start_factor: float = 0.1
    max_epochs: int = 50
    stage: str = "stage1"
    schedule: str = "cosine"
    milestones: Tuple[int, ...] = ()
    gamma: float = 0.1

    def __post_init__(self):
        if not 0 < self.min_lr <= self.base_lr:
            raise InvalidConfigError(
                f"need 0 < min_lr <= base_lr, got min_lr={self.min_lr}, base_lr={self.base_lr}")
        if self.warmup_epochs < 0 or self.max_epochs < 0:
            raise InvalidConfigError("epoch counts must be >= 0")
        if self.warmup_epochs and self.warmup_epochs >= self.max_epochs:
            raise InvalidConfigError(
                f"warmup_epochs ({self.warmup_epochs}) must be < max_epochs ({self.max_epochs})")
        if not 0 < self.warmup_start_factor <= 1:
            raise InvalidConfigError("warmup_start_factor must be in (0, 1]")
        if self.stage not in ("stage1", "stage2"):
            raise InvalidConfigError(f"unknown stage {self.stage!r}")
        if self.schedule not in ("cosine", "multistep"):
            raise InvalidConfigError(f"unknown schedule {self.schedule!r}")


@dataclass(frozen=True)
class RerankParams:
    """k-reciprocal re-ranking parameters"""

    k1: int = 28
    k2: int = 6
    lambda_value: float = 0.28
    gallery_only_neighbors: bool = False

    def __post_init__(self):
        if not 1 <= self.k2 <= self.k1:
            raise DegenerateKError(f"need 1 <= k2 <= k1, got k1={self.k1}, k2={self.k2}")
        if not 0.0 <= self.lambda_value <= 1.0:
            raise InvalidConfigError(f"lambda must be in [0, 1], got {self.lambda_value}")


@dataclass(frozen=True)
class SamplerConfig:
    """P identities x K tracklets per batch"""

    ids_per_batch: int = 12
    instances_per_id: int = 4

    @property
    def batch_size(self):
        return self.ids_per_batch * self.instances_per_id


@dataclass(frozen=True)
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 1e-4
    weight_decay_bias: float = 1e-4


@dataclass(frozen=True)
class TrainConfig:
    """Everything the training loop needs"""

    schedule: ScheduleConfig = ScheduleConfig()
    sampler: SamplerConfig = SamplerConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    loss_weights: LossWeights = LossWeights()
    pooling_mode: str = "attn"
    neck_enabled: bool = True
    label_smoothing: float = 0.1
    triplet_margin: Optional[float] = None
    temperature: float = 0.07
    frozen_groups: Tuple[str, ...] = ()
    lr_multipliers: Tuple[Tuple[str, float], ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.pooling_mode not in POOLING_MODES:
            raise InvalidConfigError(f"unknown pooling mode {self.pooling_mode!r}")
        if self.temperature <= 0:
            raise InvalidConfigError("temperature must be positive")
        if not 0 <= self.label_smoothing < 1:
            raise InvalidConfigError("label_smoothing must be in [0, 1)")
        if isinstance(self.seed, bool) or not isinstance(self.seed, (int, np.integer)):
            raise InvalidConfigError(f"seed must be an integer, got {self.seed!r}")


@dataclass(frozen=True)
class RunConfig:
    """Merged view of training, pooling, re-ranking and runtime settings"""

    train: TrainConfig = TrainConfig()
    rerank: RerankParams = RerankParams()
    rerank_enabled: bool = True
    use_flip: bool = True
    precision: str = "f64"
    threads: int = 1
    preset: str = "ours"

    def __post_init__(self):
        if self.precision not in PRECISIONS:
            raise InvalidConfigError(f"precision must be one of {PRECISIONS}")
        if self.threads < 1:
            raise InvalidConfigError("threads must be >= 1")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def to_dict(self):
        values = asdict(self)
        values["train"]["batch"] = self.train.sampler.batch_size
        return values


def _stage_schedule(base_lr, max_epochs, stage, schedule="cosine", milestones=()):
    return ScheduleConfig(
        base_lr=base_lr,
        min_lr=0.01 * base_lr,
        warmup_epochs=int(round(0.1 * max_epochs)),
        warmup_start_factor=0.1,
        max_epochs=max_epochs,
        stage=stage,
        schedule=schedule,
        milestones=tuple(milestones),
    )


_SCHEDULE_KEYS = {"base_lr", "min_lr", "warmup_epochs", "warmup_start_factor", "max_epochs",
                  "schedule", "milestones", "gamma"}
_OPTIMIZER_KEYS = {"beta1", "beta2", "epsilon", "weight_decay", "weight_decay_bias"}
_WEIGHT_KEYS = {"lambda_id", "lambda_tri", "lambda_i2t", "lambda_t2i"}
_TRAIN_KEYS = {"pooling_mode", "neck_enabled", "label_smoothing", "triplet_margin",
               "temperature", "seed"}
_RERANK_KEYS = {"k1", "k2", "lambda_value", "gallery_only_neighbors"}
_RUN_KEYS = {"rerank_enabled", "use_flip", "precision", "threads"}


# preset -> stage -> (schedule, sampler, weight_decay)
PRESETS = {
    "ours": {
        1: (_stage_schedule(2.0e-4, 50, "stage1"), SamplerConfig(12, 4), 1e-4),
        2: (_stage_schedule(1.0e-4, 40, "stage2"), SamplerConfig(6, 4), 2.5e-4),
    },
    "baseline": {
        1: (_stage_schedule(3.5e-4, 120, "stage1"), SamplerConfig(4, 4), 1e-4),
        2: (_stage_schedule(1.0e-4, 120, "stage2", "multistep", (60, 90)),
            SamplerConfig(4, 4), 2.5e-4),
    },
}


def preset_run_config(preset="ours", stage=1):
    """
    RunConfig of a named preset

    Args:
        preset: 'ours' or 'baseline'
        stage: 1 or 2

    Returns:
        RunConfig
    """
    if preset not in PRESETS or stage not in PRESETS[preset]:
        raise InvalidConfigError(f"unknown preset/stage {preset!r}/{stage!r}")
    schedule, sampler, weight_decay = PRESETS[preset][stage]
    train = TrainConfig(
        schedule=schedule,
        sampler=sampler,
        optimizer=OptimizerConfig(weight_decay=weight_decay, weight_decay_bias=1e-4),
        # baseline pools by averaging, ours by temporal attention with neck IN
        pooling_mode="attn" if preset == "ours" else "mean",
        neck_enabled=preset == "ours",
    )
    # re-ranking at inference is part of ours, off in the baseline
    return RunConfig(train=train, rerank_enabled=preset == "ours", preset=preset)


def load_json_config(path):
    """
    Read a flat JSON object of config keys

    Raises:
        InvalidConfigError: not valid JSON or not an object
    """
    try:
        with open(path, encoding="utf-8") as f:
            values = json.load(f)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise InvalidConfigError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(values, dict):
        raise InvalidConfigError(f"{path}: expected a JSON object, got {type(values).__name__}")
    return values


def _merge_overrides(config, values):
    """Overlay flat keys onto a RunConfig"""
    schedule_changes = {}
    optimizer_changes = {}
    weight_changes = {}
    sampler_changes = {}
    rerank_changes = {}
    train_changes = {}
    run_changes = {}

    for key, value in values.items():
        if value is None:
            continue
        if key == "loss_weights" and isinstance(value, dict):
            weight_changes.update(value)
        elif key in _SCHEDULE_KEYS:
            schedule_changes[key] = tuple(value) if key == "milestones" else value
        elif key in _OPTIMIZER_KEYS:
            optimizer_changes[key] = value
        elif key in _WEIGHT_KEYS:
            weight_changes[key] = value
        elif key == "batch":
            k = sampler_changes.get("instances_per_id", config.train.sampler.instances_per_id)
            if value % k:
                raise InvalidConfigError(f"batch {value} not a multiple of K={k}")
            sampler_changes["ids_per_batch"] = value // k
        elif key in ("ids_per_batch", "instances_per_id"):
            sampler_changes[key] = value
        elif key == "frozen_groups":
            train_changes[key] = tuple(value)
        elif key == "lr_multipliers":
            train_changes[key] = tuple(sorted((str(k), float(v)) for k, v in dict(value).items()))
        elif key in _TRAIN_KEYS:
            train_changes[key] = value
        elif key in _RERANK_KEYS:
            rerank_changes[key] = value
        elif key in _RUN_KEYS:
            run_changes[key] = value
        else:
            raise InvalidConfigError(f"unknown config key {key!r}")

    # derived schedule values follow base_lr / max_epochs unless set explicitly
    if "base_lr" in schedule_changes and "min_lr" not in schedule_changes:
        schedule_changes["min_lr"] = 0.01 * schedule_changes["base_lr"]
    if "max_epochs" in schedule_changes and "warmup_epochs" not in schedule_changes:
        schedule_changes["warmup_epochs"] = int(round(0.1 * schedule_changes["max_epochs"]))

    train = config.train
    train = replace(
        train,
        schedule=replace(train.schedule, **schedule_changes),
        sampler=replace(train.sampler, **sampler_changes),
        optimizer=replace(train.optimizer, **optimizer_changes),
        loss_weights=replace(train.loss_weights, **weight_changes),
        **train_changes,
    )
    return replace(config, train=train, rerank=replace(config.rerank, **rerank_changes),
                   **run_changes)


def _apply_overrides(config, values):
    """Overlay flat JSON/flag keys; wrongly typed values become InvalidConfigError"""
    try:
        return _merge_overrides(config, values)
    except XfdReidError:
        raise
    except (TypeError, ValueError) as e:
        raise InvalidConfigError(f"bad config value: {e}") from e


def resolve_run_config(preset="ours", stage=1, config_path=None, overrides=None):
    """
    Merge preset, JSON file and flag overrides (flags win)

    Args:
        preset: Preset name
        stage: Training stage (1 or 2)
        config_path: Optional JSON file with flat keys
        overrides: Optional dict of flag values (None entries ignored)

    Returns:
        RunConfig
    """
    config = preset_run_config(preset, stage)
    if config_path is not None:
        file_values = load_json_config(config_path)
        config = _apply_overrides(config, file_values)
        logging.info(f"[CONFIG] Loaded {len(file_values)} keys from {config_path}")

    overrides = dict(overrides or {})
    if overrides.get("threads") is None and os.environ.get(THREADS_ENV):
        try:
            overrides["threads"] = int(os.environ[THREADS_ENV])
        except ValueError as e:
            raise InvalidConfigError(f"{THREADS_ENV} must be an integer") from e
    return _apply_overrides(config, overrides)
