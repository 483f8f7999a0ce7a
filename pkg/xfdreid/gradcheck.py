"""
Gradient Check Module
Central finite differences against the analytic pooling and training-loss gradients
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from .config import LossWeights
from .losses import pairwise_euclidean, total_loss
from .pooling import (
    AttentionPoolParams,
    NeckParams,
    instance_norm,
    l2_normalize_rows,
    pool_batch,
    pool_batch_backward,
)
from .trainer import TrainableParams


DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-5
# denominator floor for tensors whose gradient is (near) zero
ERROR_FLOOR = 1e-4
# hardest positive/negative must win by this much so h cannot flip the selection
TIE_GAP = 1e-3


@dataclass(frozen=True)
class GradcheckCase:
    """One random configuration of the gradient suites"""

    ids_in_batch: int
    instances_per_id: int
    seq_len: int
    feature_dim: int
    num_ids: int
    neck_enabled: bool
    seed: int

    @property
    def batch_size(self):
        return self.ids_in_batch * self.instances_per_id


@dataclass
class GradcheckSummary:
    """Worst relative error per checked tensor"""

    max_errors: Dict[str, float] = field(default_factory=dict)
    num_cases: int = 0
    tolerance: float = DEFAULT_TOLERANCE
    single_frame_grad_w_zero: bool = True
    failures: List[str] = field(default_factory=list)

    @property
    def passed(self):
        return not self.failures and all(e < self.tolerance for e in self.max_errors.values())

    def update(self, errors, label):
        for name, error in errors.items():
            self.max_errors[name] = max(self.max_errors.get(name, 0.0), error)
            if not error < self.tolerance:
                self.failures.append(f"{label}: {name} rel. error {error:.3e}")

    def render(self):
        lines = [f"{'Tensor':<24}{'max rel. error':>16}  status"]
        for name in sorted(self.max_errors):
            error = self.max_errors[name]
            status = "ok" if error < self.tolerance else "FAIL"
            lines.append(f"{name:<24}{error:>16.3e}  {status}")
        lines.append(f"T=1 grad_w exactly zero: {'yes' if self.single_frame_grad_w_zero else 'no'}")
        lines.append(f"{self.num_cases} configurations, tolerance {self.tolerance:g}: "
                     f"{'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), ERROR_FLOOR)
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_gradient(fn, tensor, h=DEFAULT_STEP):
    """
    Central differences of a scalar function w.r.t. one tensor

    Args:
        fn: Zero-argument callable returning a float; reads `tensor` by reference
        tensor: Array perturbed in place (restored afterwards)
        h: Step

    Returns:
        np.ndarray: Gradient estimate shaped like tensor
    """
    grad = np.zeros(tensor.shape)
    flat = tensor.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = fn()
        flat[i] = original - h
        minus = fn()
        flat[i] = original
        out[i] = (plus - minus) / (2.0 * h)
    return grad


def random_cases(count=100, seed=0):
    """
    Random configurations; the first two pin the T=1 and C=4 edges

    Args:
        count: Number of configurations
        seed: RNG seed

    Returns:
        list: GradcheckCase
    """
    rng = np.random.default_rng(seed)
    cases = [
        GradcheckCase(2, 2, 1, 5, 3, True, int(rng.integers(2 ** 31))),
        GradcheckCase(2, 2, 4, 4, 2, True, int(rng.integers(2 ** 31))),
    ]
    while len(cases) < count:
        ids_in_batch = int(rng.integers(2, 4))
        cases.append(GradcheckCase(
            ids_in_batch=ids_in_batch,
            instances_per_id=2,
            seq_len=int(rng.integers(1, 6)),
            feature_dim=int(rng.integers(4, 9)),
            num_ids=ids_in_batch + int(rng.integers(0, 2)),
            neck_enabled=bool(rng.random() < 0.8),
            seed=int(rng.integers(2 ** 31)),
        ))
    return cases[:count]


def _random_params(case, rng):
    C, n = case.feature_dim, case.num_ids
    neck = NeckParams(case.neck_enabled, 1e-5, 1.0 + 0.1 * rng.standard_normal(C),
                      0.1 * rng.standard_normal(C))
    return TrainableParams(
        attention=AttentionPoolParams(0.5 * rng.standard_normal(C)),
        neck=neck,
        classifier_weight=0.5 * rng.standard_normal((n, C)),
        classifier_bias=0.1 * rng.standard_normal(n),
        identity_memory=rng.standard_normal((n, C)),
        log_temperature=np.asarray(math.log(rng.uniform(0.1, 1.0))),
        person_ids=tuple(range(n)),
    )


def _selection_gap(frames, labels, params):
    """Smallest margin by which each anchor's hardest pair beats the runner-up"""
    z = pool_batch(frames, params.attention.w, "attn")[0]
    y = l2_normalize_rows(instance_norm(z, params.neck)[0])[0]
    dist = pairwise_euclidean(y)
    same = labels[:, None] == labels[None, :]
    gaps = []
    for a in range(labels.size):
        for group in (np.sort(dist[a, same[a] & (np.arange(labels.size) != a)])[::-1],
                      np.sort(dist[a, ~same[a]])):
            if group.size > 1:
                gaps.append(abs(group[1] - group[0]))
    return min(gaps) if gaps else np.inf


def _sample_batch(case, rng):
    """Frames, labels and params whose triplet selections are not near ties"""
    while True:
        params = _random_params(case, rng)
        classes = rng.choice(case.num_ids, size=case.ids_in_batch, replace=False)
        labels = np.repeat(classes, case.instances_per_id)
        frames = rng.standard_normal((case.batch_size, case.seq_len, case.feature_dim))
        if _selection_gap(frames, labels, params) > TIE_GAP:
            return frames, labels, params


def check_pooling(case, h=DEFAULT_STEP):
    """
    Attention pooling gradients w.r.t. w and the frames

    Returns:
        tuple: (errors dict, grad_w)
    """
    rng = np.random.default_rng(case.seed)
    frames = rng.standard_normal((case.batch_size, case.seq_len, case.feature_dim))
    w = 0.5 * rng.standard_normal(case.feature_dim)
    upstream = rng.standard_normal((case.batch_size, case.feature_dim))

    def loss():
        return float(np.sum(upstream * pool_batch(frames, w, "attn")[0]))

    alphas = pool_batch(frames, w, "attn")[1]
    grad_w, grad_frames = pool_batch_backward(frames, w, alphas, upstream)
    errors = {
        "pool.w": relative_error(grad_w, numeric_gradient(loss, w, h)),
        "pool.frames": relative_error(grad_frames, numeric_gradient(loss, frames, h)),
    }
    return errors, grad_w


def check_total_loss(case, weights=None, h=DEFAULT_STEP):
    """
    Weighted training loss gradients w.r.t. every trainable tensor

    Returns:
        dict: 'loss.<tensor>' -> relative error
    """
    weights = weights or LossWeights()
    rng = np.random.default_rng(case.seed)
    frames, labels, params = _sample_batch(case, rng)

    def loss():
        return total_loss(frames, labels, params, weights, "attn").value

    analytic = total_loss(frames, labels, params, weights, "attn").grads
    errors = {}
    for name, tensor in params.tensors().items():
        if name.startswith("neck_") and not case.neck_enabled:
            continue
        errors[f"loss.{name}"] = relative_error(analytic[name],
                                                numeric_gradient(loss, tensor, h))
    return errors


def run_gradcheck(num_cases=100, seed=0, tolerance=DEFAULT_TOLERANCE, h=DEFAULT_STEP):
    """
    Run the pooling and training-loss suites

    Args:
        num_cases: Random configurations per suite
        seed: Seed of the configuration stream
        tolerance: Pass threshold on the max relative error
        h: Finite-difference step

    Returns:
        GradcheckSummary
    """
    summary = GradcheckSummary(tolerance=tolerance)
    for i, case in enumerate(random_cases(num_cases, seed)):
        label = (f"case {i} (P={case.ids_in_batch}, K={case.instances_per_id}, "
                 f"T={case.seq_len}, C={case.feature_dim})")
        pool_errors, grad_w = check_pooling(case, h)
        if case.seq_len == 1 and np.any(grad_w != 0.0):
            summary.single_frame_grad_w_zero = False
            summary.failures.append(f"{label}: grad_w not exactly zero for T=1")
        summary.update(pool_errors, label)
        summary.update(check_total_loss(case, h=h), label)
        summary.num_cases += 1
        logging.debug(f"[GRADCHECK] {label} done")

    level = logging.INFO if summary.passed else logging.ERROR
    logging.log(level, f"[GRADCHECK] {summary.num_cases} configurations, "
                       f"{'PASS' if summary.passed else 'FAIL'}")
    return summary
