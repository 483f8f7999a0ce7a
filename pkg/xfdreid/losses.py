"""
Loss Functions Module
Identity, batch-hard triplet and cross-modal alignment terms with analytic gradients
"""

import logging
from dataclasses import dataclass, field
from typing import Dict

import numpy as np
from scipy.special import expit, log_softmax, logsumexp

from .exceptions import DegenerateBatchError, EmptyBatchError, LabelOutOfRangeError
from .pooling import (
    instance_norm,
    instance_norm_backward,
    l2_normalize_backward,
    l2_normalize_rows,
    pool_batch,
    pool_batch_backward,
)


@dataclass
class LossTerm:
    """Scalar loss value with gradients keyed by input/tensor name"""

    value: float
    grads: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class TotalLoss:
    value: float
    terms: Dict[str, float]
    grads: Dict[str, np.ndarray]


def _check_labels(labels, num_classes):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise EmptyBatchError("empty batch")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise LabelOutOfRangeError(
            f"labels span [{labels.min()}, {labels.max()}], classes [0, {num_classes})")
    return labels


def id_loss(feats, labels, weight, bias, label_smoothing=0.1):
    """
    Label-smoothed cross-entropy of a linear identity classifier

    Args:
        feats: (B, C) embeddings
        labels: (B,) class indices
        weight: (num_ids, C) classifier weight
        bias: (num_ids,) classifier bias
        label_smoothing: Mass spread uniformly over all classes

    Returns:
        LossTerm: grads 'feats', 'classifier_weight', 'classifier_bias'
    """
    num_ids = weight.shape[0]
    labels = _check_labels(labels, num_ids)
    batch = labels.size

    logits = feats @ weight.T + bias
    log_probs = log_softmax(logits, axis=1)
    target = np.full(logits.shape, label_smoothing / num_ids)
    target[np.arange(batch), labels] += 1.0 - label_smoothing

    value = -np.sum(target * log_probs) / batch
    grad_logits = (np.exp(log_probs) - target) / batch
    return LossTerm(float(value), {
        "feats": grad_logits @ weight,
        "classifier_weight": grad_logits.T @ feats,
        "classifier_bias": grad_logits.sum(axis=0),
    })


def pairwise_euclidean(y):
    diff = y[:, None, :] - y[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=2))


def triplet_loss(feats, labels, margin=None):
    """
    Batch-hard triplet loss on l2-normalized embeddings

    Args:
        feats: (B, C) embeddings (normalized internally)
        labels: (B,) identity labels
        margin: None for the soft-margin softplus form, else hinge margin

    Returns:
        LossTerm: grads 'feats'
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise EmptyBatchError("empty batch")
    y, norms = l2_normalize_rows(feats)
    dist = pairwise_euclidean(y)

    same = labels[:, None] == labels[None, :]
    positives = same & ~np.eye(labels.size, dtype=bool)
    negatives = ~same
    valid = positives.any(axis=1) & negatives.any(axis=1)
    if not valid.any():
        raise DegenerateBatchError("no anchor has both a positive and a negative")

    anchors = np.flatnonzero(valid)
    hard_pos = np.where(positives, dist, -np.inf).argmax(axis=1)[anchors]
    hard_neg = np.where(negatives, dist, np.inf).argmin(axis=1)[anchors]
    d_pos = dist[anchors, hard_pos]
    d_neg = dist[anchors, hard_neg]
    gap = d_pos - d_neg

    if margin is None:
        losses = np.logaddexp(0.0, gap)
        slope = expit(gap)
    else:
        losses = np.maximum(0.0, margin + gap)
        slope = (margin + gap > 0).astype(y.dtype)
    coef = slope / anchors.size

    # d|a-x|/da = (a-x)/|a-x|; zero-distance pairs get a zero subgradient
    grad_y = np.zeros_like(y)
    for pairs, d, sign in ((hard_pos, d_pos, 1.0), (hard_neg, d_neg, -1.0)):
        direction = y[anchors] - y[pairs]
        safe = np.where(d > 0, d, 1.0)[:, None]
        unit = np.where(d[:, None] > 0, direction / safe, 0.0)
        step = sign * coef[:, None] * unit
        np.add.at(grad_y, anchors, step)
        np.add.at(grad_y, pairs, -step)

    return LossTerm(float(losses.mean()), {"feats": l2_normalize_backward(grad_y, y, norms)})


def cross_modal_losses(feats, labels, identity_memory, log_temperature):
    """
    Symmetric temperature-scaled alignment against a per-identity memory table

    Args:
        feats: (B, C) embeddings (normalized internally)
        labels: (B,) class indices into the memory table
        identity_memory: (num_ids, C) proxy embeddings (normalized internally)
        log_temperature: Scalar log tau

    Returns:
        tuple: (LossTerm i2t, LossTerm t2i), each with grads 'feats',
               'identity_memory', 'log_temperature'
    """
    num_ids = identity_memory.shape[0]
    labels = _check_labels(labels, num_ids)
    batch = labels.size

    u, u_norms = l2_normalize_rows(feats)
    m, m_norms = l2_normalize_rows(identity_memory)
    tau = np.exp(log_temperature)
    logits = (u @ m.T) / tau

    # embedding -> memory: softmax over all memory rows
    log_p = log_softmax(logits, axis=1)
    i2t_value = -np.mean(log_p[np.arange(batch), labels])
    grad_i2t = np.exp(log_p)
    grad_i2t[np.arange(batch), labels] -= 1.0
    grad_i2t /= batch

    # memory -> embeddings: softmax over the batch, all same-id samples are positives
    identities = np.unique(labels)
    grad_t2i = np.zeros_like(logits)
    t2i_value = 0.0
    for j in identities:
        column = logits[:, j]
        positive = labels == j
        lse_all = logsumexp(column)
        lse_pos = logsumexp(column[positive])
        t2i_value += lse_all - lse_pos
        p_pos = np.where(positive, np.exp(column - lse_pos), 0.0)
        grad_t2i[:, j] = (np.exp(column - lse_all) - p_pos) / identities.size
    t2i_value /= identities.size

    def backprop(grad_logits):
        grad_sims = grad_logits / tau
        return {
            "feats": l2_normalize_backward(grad_sims @ m, u, u_norms),
            "identity_memory": l2_normalize_backward(grad_sims.T @ u, m, m_norms),
            "log_temperature": np.asarray(-np.sum(grad_logits * logits)),
        }

    return (LossTerm(float(i2t_value), backprop(grad_i2t)),
            LossTerm(float(t2i_value), backprop(grad_t2i)))


def total_loss(frames, labels, params, weights, pooling_mode="attn", label_smoothing=0.1,
               triplet_margin=None):
    """
    Weighted multi-term objective over one batch

    Args:
        frames: (B, T, C) frame embeddings
        labels: (B,) class indices
        params: TrainableParams
        weights: LossWeights
        pooling_mode: 'mean' or 'attn'
        label_smoothing: Identity-loss smoothing
        triplet_margin: None for soft margin

    Returns:
        TotalLoss: weighted value, unweighted term values, gradient per tensor name
    """
    labels = np.asarray(labels, dtype=np.int64)
    tensors = params.tensors()
    grads = {name: np.zeros_like(t) for name, t in tensors.items()}

    w = params.attention.w
    z, alphas, _ = pool_batch(frames, w, pooling_mode)
    feats, x_hat, inv_std = instance_norm(z, params.neck)
    grad_feats = np.zeros_like(feats)

    value = 0.0
    terms = {}

    def accumulate(name, weight, term, extra):
        nonlocal value, grad_feats
        terms[name] = term.value
        value += weight * term.value
        grad_feats = grad_feats + weight * term.grads["feats"]
        for key in extra:
            grads[key] = grads[key] + weight * term.grads[key]

    if weights.lambda_id:
        accumulate("id", weights.lambda_id,
                   id_loss(feats, labels, params.classifier_weight, params.classifier_bias,
                           label_smoothing),
                   ("classifier_weight", "classifier_bias"))
    if weights.lambda_tri:
        accumulate("tri", weights.lambda_tri, triplet_loss(feats, labels, triplet_margin), ())
    if weights.lambda_i2t or weights.lambda_t2i:
        i2t, t2i = cross_modal_losses(feats, labels, params.identity_memory,
                                      params.log_temperature)
        if weights.lambda_i2t:
            accumulate("i2t", weights.lambda_i2t, i2t, ("identity_memory", "log_temperature"))
        if weights.lambda_t2i:
            accumulate("t2i", weights.lambda_t2i, t2i, ("identity_memory", "log_temperature"))

    grad_z, grad_scale, grad_shift = instance_norm_backward(grad_feats, x_hat, inv_std,
                                                            params.neck)
    if grad_scale is not None:
        grads["neck_scale"] = grad_scale
        grads["neck_shift"] = grad_shift
    if pooling_mode == "attn":
        grads["attention_w"] = pool_batch_backward(frames, w, alphas, grad_z)[0]

    logging.debug("[LOSS] " + ", ".join(f"{k}={v:.4f}" for k, v in terms.items())
                  + f", total={value:.4f}")
    return TotalLoss(float(value), terms, grads)
