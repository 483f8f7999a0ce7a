"""
Training Module
Pooling head parameters, stage training loop and head serialization
"""

import base64
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from .datamodel import Split
from .exceptions import BadMagicError, EmptyBatchError, ShapeMismatchError
from .losses import total_loss
from .optimizer import AdamOptimizer
from .pooling import AttentionPoolParams, NeckParams, embed_frames, l2_normalize_rows
from .sampler import PKSampler
from .scheduler import ParamGroupPlan, lr_at


HEAD_FORMAT = "xfdreid-head"
HEAD_VERSION = 1


@dataclass
class TrainableParams:
    """Attention vector, neck affine, classifier, identity memory and temperature"""

    attention: AttentionPoolParams
    neck: NeckParams
    classifier_weight: np.ndarray
    classifier_bias: np.ndarray
    identity_memory: np.ndarray
    log_temperature: np.ndarray
    person_ids: Tuple[int, ...]

    def __post_init__(self):
        num_ids, feature_dim = self.classifier_weight.shape
        if self.classifier_bias.shape != (num_ids,):
            raise ShapeMismatchError("classifier bias length != num_ids")
        if self.identity_memory.shape != (num_ids, feature_dim):
            raise ShapeMismatchError("identity memory shape != (num_ids, C)")
        if self.attention.w.shape != (feature_dim,):
            raise ShapeMismatchError("attention vector length != C")
        if len(self.person_ids) != num_ids:
            raise ShapeMismatchError("person_ids length != num_ids")

    @property
    def temperature(self):
        return float(np.exp(self.log_temperature))

    @property
    def feature_dim(self):
        return self.classifier_weight.shape[1]

    def tensors(self) -> Dict[str, np.ndarray]:
        """Name -> live tensor (optimizer updates write through)"""
        named = {"attention_w": self.attention.w}
        if self.neck.scale is not None:
            named["neck_scale"] = self.neck.scale
            named["neck_shift"] = self.neck.shift
        named.update({
            "classifier_weight": self.classifier_weight,
            "classifier_bias": self.classifier_bias,
            "identity_memory": self.identity_memory,
            "log_temperature": self.log_temperature,
        })
        return named

    def copy(self):
        return TrainableParams(
            attention=AttentionPoolParams(self.attention.w.copy(), self.attention.trainable),
            neck=NeckParams(self.neck.enabled, self.neck.epsilon,
                            None if self.neck.scale is None else self.neck.scale.copy(),
                            None if self.neck.shift is None else self.neck.shift.copy()),
            classifier_weight=self.classifier_weight.copy(),
            classifier_bias=self.classifier_bias.copy(),
            identity_memory=self.identity_memory.copy(),
            log_temperature=self.log_temperature.copy(),
            person_ids=tuple(self.person_ids),
        )


def init_params(person_ids, feature_dim, seed=0, temperature=0.07, neck_enabled=True,
                dtype=np.float64, memory=None):
    """
    Initial head parameters

    Args:
        person_ids: Sorted train identities (class i <-> person_ids[i])
        feature_dim: C
        seed: RNG seed for classifier and memory
        temperature: Initial tau of the cross-modal terms
        neck_enabled: Instance norm at the neck
        dtype: Floating dtype
        memory: Optional (num_ids, C) identity memory start (random unit rows if None)

    Returns:
        TrainableParams
    """
    rng = np.random.default_rng(seed)
    num_ids = len(person_ids)
    classifier_weight = 0.001 * rng.standard_normal((num_ids, feature_dim))
    if memory is None:
        memory = rng.standard_normal((num_ids, feature_dim))
        memory /= np.linalg.norm(memory, axis=1, keepdims=True)
    else:
        memory = np.array(memory)
        if memory.shape != (num_ids, feature_dim):
            raise ShapeMismatchError("identity memory start shape != (num_ids, C)")
    return TrainableParams(
        attention=AttentionPoolParams.zeros(feature_dim, dtype),
        neck=NeckParams.with_affine(feature_dim, enabled=neck_enabled, dtype=dtype),
        classifier_weight=classifier_weight.astype(dtype),
        classifier_bias=np.zeros(num_ids, dtype=dtype),
        identity_memory=memory.astype(dtype),
        log_temperature=np.asarray(math.log(temperature), dtype=dtype),
        person_ids=tuple(int(p) for p in person_ids),
    )


def identity_prototypes(frames, labels, num_ids, neck):
    """
    Unit class means of the initial (mean-pooled) train embeddings

    Args:
        frames: (N, T, C) train frames
        labels: (N,) class indices, every class present
        num_ids: Number of classes
        neck: NeckParams at initialization

    Returns:
        np.ndarray: (num_ids, C)
    """
    embeddings = embed_frames(frames, "mean", None, neck)
    sums = np.zeros((num_ids, embeddings.shape[1]), dtype=embeddings.dtype)
    np.add.at(sums, np.asarray(labels), embeddings)
    return l2_normalize_rows(sums)[0]


@dataclass
class TrainResult:
    params: TrainableParams
    history: Dict[str, List[float]] = field(default_factory=dict)


class Trainer:
    """Stage training loop: sample -> pool -> neck -> losses -> backward -> step"""

    def __init__(self, dataset, config, initial_params=None):
        """
        Initialize trainer

        Args:
            dataset: Dataset with a non-empty train split
            config: TrainConfig
            initial_params: Optional TrainableParams to continue from (e.g. Stage 1 head)
        """
        self.dataset = dataset
        self.config = config

        self.records = dataset.records_for(Split.TRAIN)
        if not self.records:
            raise EmptyBatchError("train split is empty")
        person_ids = dataset.person_ids(Split.TRAIN)
        self.class_of = {pid: i for i, pid in enumerate(person_ids)}

        dtype = dataset.features[0].frames.dtype
        if initial_params is None:
            # memory starts at the identity prototypes, not at random directions
            frames, labels = self._batch([r.tracklet_index for r in self.records])
            neck = NeckParams.with_affine(dataset.feature_dim, config.neck_enabled, dtype=dtype)
            memory = identity_prototypes(frames, labels, len(person_ids), neck)
            self.params = init_params(person_ids, dataset.feature_dim, config.seed,
                                      config.temperature, config.neck_enabled, dtype, memory)
        else:
            if (tuple(initial_params.person_ids) != tuple(person_ids)
                    or initial_params.feature_dim != dataset.feature_dim):
                raise ShapeMismatchError("initial head does not match the train identities or C")
            self.params = initial_params.copy()
        self.plan = ParamGroupPlan.default(
            pooling_mode=config.pooling_mode,
            neck_enabled=config.neck_enabled,
            frozen=config.frozen_groups,
            multipliers=dict(config.lr_multipliers),
            weight_decay=config.optimizer.weight_decay,
            weight_decay_bias=config.optimizer.weight_decay_bias,
        )
        self.optimizer = AdamOptimizer(config.optimizer.beta1, config.optimizer.beta2,
                                       config.optimizer.epsilon)
        self.sampler = PKSampler(self.records, config.sampler.ids_per_batch,
                                 config.sampler.instances_per_id, config.seed)
        self.history = {}

        logging.info(f"[TRAIN] {config.schedule.stage}: {len(self.records)} train tracklets, "
                     f"{len(person_ids)} ids, C={dataset.feature_dim}, T={dataset.seq_len}, "
                     f"mode={config.pooling_mode}")

    def _batch(self, indices):
        frames = np.stack([self.dataset.features[i].frames for i in indices])
        labels = np.array([self.class_of[self.dataset.record(i).person_id] for i in indices])
        return frames, labels

    def train_epoch(self, epoch):
        """
        Run one epoch

        Args:
            epoch: Zero-based epoch

        Returns:
            dict: Mean of each loss term and of the weighted total over the epoch
        """
        cfg = self.config
        lrs = self.plan.lr_per_tensor(epoch, cfg.schedule)
        decays = self.plan.weight_decay_per_tensor()
        tensors = self.params.tensors()
        lrs = {name: lr for name, lr in lrs.items() if name in tensors}

        sums = {}
        batches = self.sampler.epoch_batches(epoch)
        for indices in batches:
            frames, labels = self._batch(indices)
            result = total_loss(frames, labels, self.params, cfg.loss_weights,
                                cfg.pooling_mode, cfg.label_smoothing, cfg.triplet_margin)
            self.optimizer.step(tensors, result.grads, lrs, decays)
            for name, value in result.terms.items():
                sums[name] = sums.get(name, 0.0) + value
            sums["total"] = sums.get("total", 0.0) + result.value

        return {name: total / len(batches) for name, total in sums.items()}

    def run(self):
        """
        Train for schedule.max_epochs epochs

        Returns:
            TrainResult
        """
        max_epochs = self.config.schedule.max_epochs
        for epoch in range(max_epochs):
            means = self.train_epoch(epoch)
            for name, value in means.items():
                self.history.setdefault(name, []).append(value)
            lr = lr_at(epoch, self.config.schedule)
            logging.info(f"[TRAIN] Epoch {epoch + 1}/{max_epochs} lr={lr:.3e} "
                         + " ".join(f"{k}={v:.4f}" for k, v in means.items()))
        logging.info(f"[TRAIN] {self.config.schedule.stage} done, tau={self.params.temperature:.4f}")
        return TrainResult(self.params, self.history)


def train(dataset, config, initial_params=None):
    """
    Train the pooling head for one stage

    Args:
        dataset: Dataset
        config: TrainConfig
        initial_params: Optional TrainableParams to continue from

    Returns:
        TrainResult: trained parameters and per-epoch loss history
    """
    return Trainer(dataset, config, initial_params).run()


def _encode(array):
    data = np.ascontiguousarray(array, dtype="<f8")
    return {"shape": list(data.shape), "dtype": "float64",
            "data": base64.b64encode(data.tobytes()).decode("ascii")}


def _decode(entry, dtype):
    raw = base64.b64decode(entry["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).astype(dtype)


def head_to_dict(params, pooling_mode, extra=None):
    """JSON-ready head document (base64 little-endian float64 payloads)"""
    doc = {
        "format": HEAD_FORMAT,
        "version": HEAD_VERSION,
        "pooling_mode": pooling_mode,
        "person_ids": list(params.person_ids),
        "neck": {"enabled": params.neck.enabled, "epsilon": params.neck.epsilon},
        "tensors": {name: _encode(t) for name, t in params.tensors().items()},
    }
    doc.update(extra or {})
    return doc


def save_head(path, params, pooling_mode, extra=None):
    """
    Write trained parameters as a JSON head file

    Args:
        path: Output path
        params: TrainableParams
        pooling_mode: 'mean' or 'attn'
        extra: Additional top-level keys (config, input hash, history)
    """
    with open(path, "w", encoding="utf-8") as f:
        json.dump(head_to_dict(params, pooling_mode, extra), f, indent=2, sort_keys=True)
    logging.info(f"[TRAIN] Head written to {path}")


def load_head(path, dtype=np.float64):
    """
    Read a JSON head file

    Returns:
        tuple: (TrainableParams, pooling_mode, full document)
    """
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("format") != HEAD_FORMAT:
        raise BadMagicError(f"{path}: not a head file")
    if doc.get("version") != HEAD_VERSION:
        raise BadMagicError(f"{path}: unsupported head version {doc.get('version')}")

    t = {name: _decode(entry, dtype) for name, entry in doc["tensors"].items()}
    neck = NeckParams(doc["neck"]["enabled"], doc["neck"]["epsilon"],
                      t.get("neck_scale"), t.get("neck_shift"))
    params = TrainableParams(
        attention=AttentionPoolParams(t["attention_w"]),
        neck=neck,
        classifier_weight=t["classifier_weight"],
        classifier_bias=t["classifier_bias"],
        identity_memory=t["identity_memory"],
        log_temperature=t["log_temperature"].reshape(()),
        person_ids=tuple(doc["person_ids"]),
    )
    return params, doc["pooling_mode"], doc
