"""
Learning Rate Scheduling Module
Warmup + cosine annealing (or multi-step) and parameter-group LR planning
"""

import bisect
import logging
import math
from dataclasses import dataclass
from typing import Dict, Tuple

from .exceptions import EpochOutOfRangeError, FrozenGroupError, InvalidConfigError


def lr_at(epoch, cfg):
    """
    Learning rate of one epoch

    Args:
        epoch: Zero-based epoch, 0 <= epoch < max_epochs
        cfg: ScheduleConfig

    Returns:
        float: Learning rate
    """
    if not 0 <= epoch < cfg.max_epochs:
        raise EpochOutOfRangeError(f"epoch {epoch} outside [0, {cfg.max_epochs})")

    warmup = cfg.warmup_epochs
    if epoch < warmup:
        return cfg.base_lr * (cfg.warmup_start_factor
                              + (1.0 - cfg.warmup_start_factor) * epoch / warmup)

    if cfg.schedule == "multistep":
        decays = bisect.bisect_right(sorted(cfg.milestones), epoch)
        return cfg.base_lr * cfg.gamma ** decays

    span = cfg.max_epochs - 1 - warmup
    if span <= 0:
        # single post-warmup epoch: stay at base
        return cfg.base_lr
    progress = (epoch - warmup) / span
    return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))


@dataclass(frozen=True)
class ParamGroup:
    """Named set of tensors sharing freeze flag, LR multiplier and weight decay"""

    name: str
    tensors: Tuple[str, ...]
    trainable: bool = True
    lr_multiplier: float = 1.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.lr_multiplier) or self.lr_multiplier < 0:
            raise InvalidConfigError(
                f"group {self.name}: lr multiplier must be finite and >= 0")


def effective_lr(group, epoch, cfg):
    """
    LR of one parameter group (schedule x multiplier)

    Args:
        group: ParamGroup
        epoch: Zero-based epoch
        cfg: ScheduleConfig

    Returns:
        float: Learning rate
    """
    if not group.trainable:
        raise FrozenGroupError(f"group {group.name} is frozen")
    return lr_at(epoch, cfg) * group.lr_multiplier


# group name -> tensors of TrainableParams
DEFAULT_GROUPS = (
    ("attention", ("attention_w",)),
    ("neck", ("neck_scale", "neck_shift")),
    ("classifier", ("classifier_weight",)),
    ("classifier_bias", ("classifier_bias",)),
    ("identity_memory", ("identity_memory",)),
    ("temperature", ("log_temperature",)),
)


class ParamGroupPlan:
    """Freeze flags and LR multipliers per parameter group"""

    def __init__(self, groups):
        """
        Initialize plan

        Args:
            groups: Iterable of ParamGroup; every tensor must appear in exactly one group
        """
        self.groups = tuple(groups)
        owner = {}
        for group in self.groups:
            for tensor in group.tensors:
                if tensor in owner:
                    raise InvalidConfigError(
                        f"tensor {tensor} in groups {owner[tensor]} and {group.name}")
                owner[tensor] = group.name

    @classmethod
    def default(cls, pooling_mode="attn", neck_enabled=True, frozen=(), multipliers=None,
                weight_decay=1e-4, weight_decay_bias=1e-4):
        """
        Standard plan for the pooling head

        Args:
            pooling_mode: 'mean' freezes the attention group
            neck_enabled: False freezes the neck affine
            frozen: Extra group names to freeze
            multipliers: Dict group name -> LR multiplier (e.g. 0.1 for slow groups)
            weight_decay: Decay of weight tensors
            weight_decay_bias: Decay of the classifier bias

        Returns:
            ParamGroupPlan
        """
        multipliers = dict(multipliers or {})
        names = {name for name, _ in DEFAULT_GROUPS}
        unknown = (set(frozen) | set(multipliers)) - names
        if unknown:
            raise InvalidConfigError(f"unknown parameter groups {sorted(unknown)}")

        frozen = set(frozen)
        if pooling_mode == "mean":
            frozen.add("attention")
        if not neck_enabled:
            frozen.add("neck")

        groups = []
        for name, tensors in DEFAULT_GROUPS:
            if name == "classifier_bias":
                decay = weight_decay_bias
            elif name == "temperature":
                decay = 0.0
            else:
                decay = weight_decay
            groups.append(ParamGroup(name, tensors, name not in frozen,
                                     multipliers.get(name, 1.0), decay))
        plan = cls(groups)
        logging.info(f"[SCHED] Param groups: " + ", ".join(
            f"{g.name}({'x%g' % g.lr_multiplier if g.trainable else 'frozen'})" for g in groups))
        return plan

    def trainable_groups(self):
        return [g for g in self.groups if g.trainable]

    def lr_per_tensor(self, epoch, cfg) -> Dict[str, float]:
        """LR of every trainable tensor (frozen tensors are absent)"""
        return {t: effective_lr(g, epoch, cfg) for g in self.trainable_groups() for t in g.tensors}

    def weight_decay_per_tensor(self) -> Dict[str, float]:
        return {t: g.weight_decay for g in self.trainable_groups() for t in g.tensors}
