"""
Temporal Pooling Module
Frame sequence -> tracklet embedding: mean / attention pooling, neck, flip average, l2
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import softmax

from .datamodel import FrameFeatureSequence, check_same_dim
from .exceptions import (
    DimMismatchError,
    StaleCacheError,
    TooFewChannelsError,
    ZeroVectorError,
)


@dataclass
class AttentionPoolParams:
    """Learnable frame-scoring vector w (length C)"""

    w: np.ndarray
    trainable: bool = True

    def __post_init__(self):
        if self.w.ndim != 1 or not np.all(np.isfinite(self.w)):
            raise DimMismatchError("attention vector must be a finite 1-D array")

    @classmethod
    def zeros(cls, feature_dim, dtype=np.float64):
        # zero start == mean pooling
        return cls(np.zeros(feature_dim, dtype=dtype))


@dataclass(frozen=True)
class PooledEmbedding:
    z: np.ndarray
    alphas: np.ndarray
    tracklet_index: int


@dataclass
class NeckParams:
    """Instance normalization at the neck, with optional per-channel affine"""

    enabled: bool = True
    epsilon: float = 1e-5
    scale: Optional[np.ndarray] = None
    shift: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("neck epsilon must be positive")
        if (self.scale is None) != (self.shift is None):
            raise ValueError("neck affine needs both scale and shift")
        if self.scale is not None and self.scale.shape != self.shift.shape:
            raise DimMismatchError("neck scale/shift lengths differ")

    @classmethod
    def with_affine(cls, feature_dim, enabled=True, epsilon=1e-5, dtype=np.float64):
        return cls(enabled, epsilon, np.ones(feature_dim, dtype=dtype),
                   np.zeros(feature_dim, dtype=dtype))


@dataclass(frozen=True)
class AttentionCache:
    """Forward-pass state needed by attention_pool_backward"""

    tracklet_index: int
    w: np.ndarray
    scores: np.ndarray
    alphas: np.ndarray


def _frames(seq):
    return seq.frames if isinstance(seq, FrameFeatureSequence) else np.asarray(seq)


def _index(seq):
    return seq.tracklet_index if isinstance(seq, FrameFeatureSequence) else -1


# ---------------------------------------------------------------------------
# Batched kernels (B, T, C)
# ---------------------------------------------------------------------------

def uniform_weights(batch, seq_len, dtype=np.float64):
    return np.full((batch, seq_len), 1.0 / seq_len, dtype=dtype)


def pool_batch(frames, w=None, mode="attn"):
    """
    Pool a batch of sequences

    Args:
        frames: (B, T, C) frame embeddings
        w: Attention vector (C,), required for mode 'attn'
        mode: 'mean' or 'attn'

    Returns:
        tuple: (z (B, C), alphas (B, T), scores (B, T) or None)
    """
    batch, seq_len, feature_dim = frames.shape
    if mode == "mean":
        alphas = uniform_weights(batch, seq_len, frames.dtype)
        scores = None
    elif mode == "attn":
        if w is None or w.shape != (feature_dim,):
            raise DimMismatchError(
                f"attention vector length {None if w is None else w.shape} != C={feature_dim}")
        scores = frames @ w
        alphas = softmax(scores, axis=1)
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    # same contraction for both modes, so w = 0 reproduces mean pooling exactly
    z = np.matmul(alphas[:, None, :], frames)[:, 0, :]
    return z, alphas, scores


def pool_batch_backward(frames, w, alphas, grad_z):
    """
    Gradients of attention pooling

    Args:
        frames: (B, T, C)
        w: (C,)
        alphas: (B, T) from the forward pass
        grad_z: (B, C) upstream gradient

    Returns:
        tuple: (grad_w (C,) summed over the batch, grad_frames (B, T, C))
    """
    g = np.einsum("btc,bc->bt", frames, grad_z)
    grad_scores = alphas * (g - np.sum(alphas * g, axis=1, keepdims=True))
    grad_w = np.einsum("bt,btc->c", grad_scores, frames)
    grad_frames = alphas[:, :, None] * grad_z[:, None, :] + grad_scores[:, :, None] * w
    return grad_w, grad_frames


def instance_norm(z, neck):
    """
    Per-sample standardization across channels

    Args:
        z: (B, C) or (C,)
        neck: NeckParams

    Returns:
        tuple: (output, normalized x_hat, inverse std) - x_hat/inv_std are None when disabled
    """
    if not neck.enabled:
        return z, None, None
    if z.shape[-1] < 2:
        raise TooFewChannelsError(f"instance norm needs C >= 2, got {z.shape[-1]}")
    mu = z.mean(axis=-1, keepdims=True)
    var = z.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + neck.epsilon)
    x_hat = (z - mu) * inv_std
    out = x_hat if neck.scale is None else neck.scale * x_hat + neck.shift
    return out, x_hat, inv_std


def instance_norm_backward(grad_out, x_hat, inv_std, neck):
    """
    Backward of instance_norm

    Returns:
        tuple: (grad_z, grad_scale or None, grad_shift or None)
    """
    if not neck.enabled:
        return grad_out, None, None
    grad_scale = grad_shift = None
    grad_xhat = grad_out
    if neck.scale is not None:
        grad_scale = np.sum(grad_out * x_hat, axis=0) if grad_out.ndim == 2 else grad_out * x_hat
        grad_shift = np.sum(grad_out, axis=0) if grad_out.ndim == 2 else grad_out.copy()
        grad_xhat = grad_out * neck.scale
    grad_z = inv_std * (grad_xhat
                        - grad_xhat.mean(axis=-1, keepdims=True)
                        - x_hat * np.mean(grad_xhat * x_hat, axis=-1, keepdims=True))
    return grad_z, grad_scale, grad_shift


def l2_normalize_rows(z):
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroVectorError("cannot l2-normalize a zero vector")
    return z / norms, norms


def l2_normalize_backward(grad_y, y, norms):
    return (grad_y - y * np.sum(grad_y * y, axis=-1, keepdims=True)) / norms


# ---------------------------------------------------------------------------
# Per-tracklet operations
# ---------------------------------------------------------------------------

def mean_pool(seq):
    """
    Uniform average of the frames

    Args:
        seq: FrameFeatureSequence

    Returns:
        PooledEmbedding
    """
    frames = _frames(seq)
    z, alphas, _ = pool_batch(frames[None], mode="mean")
    return PooledEmbedding(z[0], alphas[0], _index(seq))


def attention_scores(seq, params):
    """s_t = w . f_t for every frame"""
    frames = _frames(seq)
    if params.w.shape != (frames.shape[1],):
        raise DimMismatchError(f"w has length {params.w.shape[0]}, frames have C={frames.shape[1]}")
    return frames @ params.w


def attention_weights(scores):
    """Softmax over the temporal axis (max-subtracted)"""
    return softmax(np.asarray(scores, dtype=float))


def attention_pool_forward(seq, params):
    """
    Attention pooling, returning the cache for the backward pass

    Args:
        seq: FrameFeatureSequence
        params: AttentionPoolParams

    Returns:
        tuple: (PooledEmbedding, AttentionCache)
    """
    frames = _frames(seq)
    if params.w.shape != (frames.shape[1],):
        raise DimMismatchError(f"w has length {params.w.shape[0]}, frames have C={frames.shape[1]}")
    z, alphas, scores = pool_batch(frames[None], params.w, mode="attn")
    pooled = PooledEmbedding(z[0], alphas[0], _index(seq))
    cache = AttentionCache(_index(seq), params.w.copy(), scores[0], alphas[0])
    return pooled, cache


def attention_pool(seq, params):
    """z = sum_t alpha_t f_t with alpha = softmax(w . f_t)"""
    return attention_pool_forward(seq, params)[0]


def attention_pool_backward(seq, params, grad_z, cache):
    """
    Analytic gradients of attention pooling

    Args:
        seq: FrameFeatureSequence used in the forward pass
        params: AttentionPoolParams (must be unchanged since forward)
        grad_z: Upstream gradient (C,)
        cache: AttentionCache from attention_pool_forward

    Returns:
        tuple: (grad_w (C,), grad_frames (T, C))
    """
    frames = _frames(seq)
    if cache is None:
        raise StaleCacheError("backward called without a forward pass")
    if (cache.tracklet_index != _index(seq) or cache.alphas.shape[0] != frames.shape[0]
            or not np.array_equal(cache.w, params.w)):
        raise StaleCacheError(
            f"cache belongs to tracklet {cache.tracklet_index} / another w; "
            f"backward requested for tracklet {_index(seq)}")
    grad_z = np.asarray(grad_z)
    if grad_z.shape != (frames.shape[1],):
        raise DimMismatchError(f"grad_z shape {grad_z.shape}, expected ({frames.shape[1]},)")
    grad_w, grad_frames = pool_batch_backward(frames[None], params.w, cache.alphas[None],
                                              grad_z[None])
    return grad_w, grad_frames[0]


class TemporalAttentionPool:
    """Attention pooling head holding the forward cache of one worker"""

    def __init__(self, params):
        """
        Initialize attention pool

        Args:
            params: AttentionPoolParams
        """
        self.params = params
        self._cache = None

    def forward(self, seq):
        pooled, self._cache = attention_pool_forward(seq, self.params)
        return pooled

    def backward(self, seq, grad_z):
        grads = attention_pool_backward(seq, self.params, grad_z, self._cache)
        self._cache = None
        return grads

    def reset(self):
        self._cache = None


def instance_norm_neck(z, neck):
    """
    Instance normalization of one embedding (identity when disabled)

    Args:
        z: (C,) pooled embedding
        neck: NeckParams

    Returns:
        np.ndarray: (C,)
    """
    return instance_norm(np.asarray(z), neck)[0]


def l2_normalize(z):
    """z / ||z||_2"""
    return l2_normalize_rows(np.asarray(z))[0]


def flip_average(z_orig, z_flip):
    """Elementwise mean of original and flipped-sequence embeddings"""
    check_same_dim(z_orig, z_flip, "flip_average")
    return (np.asarray(z_orig) + np.asarray(z_flip)) / 2.0


# ---------------------------------------------------------------------------
# Inference pipeline: pool -> neck -> flip average -> l2
# ---------------------------------------------------------------------------

def embed_frames(frames, mode, w, neck, flipped_frames=None):
    """
    Fixed inference pipeline over a batch

    Args:
        frames: (B, T, C)
        mode: 'mean' or 'attn'
        w: Attention vector (ignored for 'mean')
        neck: NeckParams
        flipped_frames: Optional (B, T, C) flipped-sequence frames

    Returns:
        np.ndarray: (B, C) unit-norm embeddings
    """
    z = instance_norm(pool_batch(frames, w, mode)[0], neck)[0]
    if flipped_frames is not None:
        z_flip = instance_norm(pool_batch(flipped_frames, w, mode)[0], neck)[0]
        z = flip_average(z, z_flip)
    return l2_normalize_rows(z)[0]


def embed_tracklet(seq, mode, params, neck, flip_seq=None):
    """Pipeline for a single tracklet; returns a (C,) unit vector"""
    flipped = None if flip_seq is None else _frames(flip_seq)[None]
    w = None if params is None else params.w
    return embed_frames(_frames(seq)[None], mode, w, neck, flipped)[0]


def embed_dataset(dataset, mode, params, neck, use_flip=True, batch_size=256):
    """
    Embed every tracklet of a dataset

    Args:
        dataset: Dataset
        mode: 'mean' or 'attn'
        params: AttentionPoolParams (or None for 'mean')
        neck: NeckParams
        use_flip: Average with flipped features when the dataset carries them
        batch_size: Tracklets per vectorized chunk

    Returns:
        np.ndarray: (num_tracklets, C), row i = tracklet_index i
    """
    w = None if params is None else params.w
    flip = use_flip and dataset.flipped_features is not None
    rows = []
    n = len(dataset.features)
    for start in range(0, n, batch_size):
        chunk = dataset.features[start:start + batch_size]
        frames = np.stack([s.frames for s in chunk])
        flipped = (np.stack([s.frames for s in dataset.flipped_features[start:start + batch_size]])
                   if flip else None)
        rows.append(embed_frames(frames, mode, w, neck, flipped))
    embeddings = np.concatenate(rows) if rows else np.zeros((0, dataset.feature_dim))
    logging.info(f"[POOL] Embedded {n} tracklets (mode={mode}, flip={'on' if flip else 'off'}, "
                 f"neck={'on' if neck.enabled else 'off'})")
    return embeddings
