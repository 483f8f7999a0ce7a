"""
Retrieval Module
Cosine distance matrices and k-reciprocal re-ranking
"""

import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .config import RerankParams
from .exceptions import (
    BadMagicError,
    DegenerateKError,
    DimMismatchError,
    ShapeMismatchError,
    TooFewElementsError,
    ZeroVectorError,
)


DISTANCE_MAGIC = b"XFDD"
# magic, Q, G, stage, k1, k2, lambda
_DISTANCE_HEADER = struct.Struct("<4sIIB3f")
UNIT_NORM_TOL = 1e-6


class Stage(str, Enum):
    RAW_COSINE = "raw_cosine"
    RERANKED = "reranked"


_STAGE_CODES = {Stage.RAW_COSINE: 0, Stage.RERANKED: 1}


@dataclass(frozen=True)
class EmbeddingSet:
    """Unit-norm embeddings (N x C) with their manifest records"""

    matrix: np.ndarray
    records: Tuple = ()

    def __post_init__(self):
        if self.matrix.ndim != 2:
            raise ShapeMismatchError("embedding matrix must be 2-D")
        if self.records and len(self.records) != self.matrix.shape[0]:
            raise ShapeMismatchError("records not aligned with embedding rows")
        norms = np.linalg.norm(self.matrix, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
            raise ZeroVectorError("embedding rows must be l2-normalized")

    @classmethod
    def from_embeddings(cls, embeddings, records):
        """Rows of a per-tracklet embedding table selected by record order"""
        rows = [r.tracklet_index for r in records]
        return cls(np.asarray(embeddings)[rows], tuple(records))

    def __len__(self):
        return self.matrix.shape[0]

    @property
    def person_ids(self):
        return np.array([r.person_id for r in self.records], dtype=np.int64)

    @property
    def camera_ids(self):
        return np.array([r.camera_id for r in self.records], dtype=np.int64)


@dataclass(frozen=True)
class DistanceMatrix:
    """Query x gallery distances and the stage that produced them"""

    values: np.ndarray
    stage: Stage = Stage.RAW_COSINE
    params: Optional[RerankParams] = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ShapeMismatchError("distance matrix has non-finite entries")

    @property
    def shape(self):
        return self.values.shape


def _matrix(embeddings):
    m = embeddings.matrix if isinstance(embeddings, EmbeddingSet) else np.asarray(embeddings)
    return m.astype(np.float64, copy=False)


def _cosine(a, b):
    return np.clip(1.0 - a @ b.T, 0.0, 2.0)


def cosine_distance_matrix(queries, gallery):
    """
    D[i][j] = 1 - q_i . g_j on unit vectors

    Args:
        queries: EmbeddingSet (or Q x C array)
        gallery: EmbeddingSet (or G x C array)

    Returns:
        DistanceMatrix (stage raw_cosine)
    """
    q = _matrix(queries)
    g = _matrix(gallery)
    if q.shape[1] != g.shape[1]:
        raise DimMismatchError(f"query C={q.shape[1]} != gallery C={g.shape[1]}")
    return DistanceMatrix(_cosine(q, g), Stage.RAW_COSINE)


def rank_lists(distances):
    """Per-query gallery order by ascending distance, ties by gallery index"""
    values = distances.values if isinstance(distances, DistanceMatrix) else distances
    return np.argsort(values, axis=1, kind="stable")


def _chunks(n, parts):
    bounds = np.linspace(0, n, parts + 1).astype(int)
    return [(bounds[i], bounds[i + 1]) for i in range(parts) if bounds[i] < bounds[i + 1]]


class KReciprocalReranker:
    """k-reciprocal encoding + Jaccard distance blended with the original distance"""

    def __init__(self, params=None, threads=1):
        """
        Initialize re-ranker

        Args:
            params: RerankParams (defaults k1=28, k2=6, lambda=0.28)
            threads: Workers for the row-wise maps; output does not depend on it
        """
        self.params = params or RerankParams()
        self.threads = max(1, int(threads))

    def _map_rows(self, fn, n):
        """Apply fn(start, stop) over row chunks; results concatenated in row order"""
        if self.threads == 1 or n < 2:
            return [fn(0, n)]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(lambda bounds: fn(*bounds), _chunks(n, self.threads)))

    def rerank(self, queries, gallery):
        """
        Re-rank query x gallery distances

        Args:
            queries: EmbeddingSet (or Q x C unit-norm array)
            gallery: EmbeddingSet (or G x C unit-norm array)

        Returns:
            DistanceMatrix (stage reranked)
        """
        k1, k2, lam = self.params.k1, self.params.k2, self.params.lambda_value
        if not 1 <= k2 <= k1:
            raise DegenerateKError(f"need 1 <= k2 <= k1, got k1={k1}, k2={k2}")

        raw = cosine_distance_matrix(queries, gallery).values
        q = _matrix(queries)
        g = _matrix(gallery)
        num_query = q.shape[0]
        features = np.vstack([q, g])
        n = features.shape[0]
        if n <= k1:
            raise TooFewElementsError(f"Q+G={n} must exceed k1={k1}")

        dist = _cosine(features, features)
        np.fill_diagonal(dist, 0.0)

        # neighbour candidates: everything but p itself (optionally gallery only)
        ranking_dist = dist.copy()
        if self.params.gallery_only_neighbors:
            ranking_dist[:, :num_query] = np.inf
        np.fill_diagonal(ranking_dist, np.inf)
        order = np.argsort(ranking_dist, axis=1, kind="stable")
        num_candidates = np.isfinite(ranking_dist).sum(axis=1)

        def knn_mask(k):
            mask = np.zeros((n, n), dtype=bool)
            for p in range(n):
                mask[p, order[p, :min(k, num_candidates[p])]] = True
            return mask

        def reciprocal_mask(k):
            knn = knn_mask(k)
            recip = knn & knn.T
            if self.params.gallery_only_neighbors:
                # query p is mutual with gallery i when p would rank inside i's k nearest
                kth = np.full(n, np.inf)
                enough = num_candidates >= k
                kth[enough] = ranking_dist[enough, order[enough, k - 1]]
                back = dist[num_query:, :num_query].T <= kth[None, num_query:]
                recip[:num_query, num_query:] = knn[:num_query, num_query:] & back
            return recip

        recip_full = reciprocal_mask(k1)
        recip_half = reciprocal_mask(int(math.ceil(k1 / 2)))

        def encode(start, stop):
            rows = np.zeros((stop - start, n))
            for i, p in enumerate(range(start, stop)):
                expanded = recip_full[p].copy()
                for cand in np.flatnonzero(recip_full[p]):
                    cand_set = recip_half[cand]
                    overlap = np.count_nonzero(cand_set & recip_full[p])
                    if 3 * overlap >= 2 * np.count_nonzero(cand_set):
                        expanded |= cand_set
                expanded[p] = True
                weights = np.where(expanded, np.exp(-dist[p]), 0.0)
                rows[i] = weights / weights.sum()
            return rows

        encoded = np.vstack(self._map_rows(encode, n))

        def expand(start, stop):
            rows = np.zeros((stop - start, n))
            for i, p in enumerate(range(start, stop)):
                members = np.concatenate(([p], order[p, :min(k2 - 1, num_candidates[p])]))
                rows[i] = encoded[members].mean(axis=0)
            return rows

        if k2 > 1:
            encoded = np.vstack(self._map_rows(expand, n))

        v_query = encoded[:num_query]
        v_gallery = encoded[num_query:]

        def jaccard(start, stop):
            out = np.zeros((stop - start, v_gallery.shape[0]))
            for i, p in enumerate(range(start, stop)):
                mins = np.minimum(v_query[p], v_gallery).sum(axis=1)
                maxs = np.maximum(v_query[p], v_gallery).sum(axis=1)
                out[i] = 1.0 - mins / maxs
            return out

        jaccard_dist = np.vstack(self._map_rows(jaccard, num_query))
        final = lam * raw + (1.0 - lam) * jaccard_dist

        logging.info(f"[RERANK] Q={num_query}, G={n - num_query}, k1={k1}, k2={k2}, "
                     f"lambda={lam}, threads={self.threads}")
        return DistanceMatrix(final, Stage.RERANKED, self.params)


def k_reciprocal_rerank(queries, gallery, params=None, threads=1):
    """Functional form of KReciprocalReranker.rerank"""
    return KReciprocalReranker(params, threads).rerank(queries, gallery)


def write_distance_matrix(path, distances):
    """
    Write a DistanceMatrix into the XFDD container

    Args:
        path: Output path
        distances: DistanceMatrix
    """
    q, g = distances.values.shape
    params = distances.params
    k1, k2, lam = (params.k1, params.k2, params.lambda_value) if params else (0.0, 0.0, 0.0)
    header = _DISTANCE_HEADER.pack(DISTANCE_MAGIC, q, g, _STAGE_CODES[distances.stage],
                                   k1, k2, lam)
    with open(path, "wb") as f:
        f.write(header)
        f.write(distances.values.astype("<f4").tobytes())
    logging.info(f"[RERANK] Wrote {q}x{g} {distances.stage.value} distances to {path}")


def read_distance_matrix(path):
    """Read an XFDD file back into a DistanceMatrix (float64 values)"""
    raw = Path(path).read_bytes()
    if len(raw) < _DISTANCE_HEADER.size or raw[:4] != DISTANCE_MAGIC:
        raise BadMagicError(f"{path}: not a distance-matrix file")
    _, q, g, code, k1, k2, lam = _DISTANCE_HEADER.unpack_from(raw)
    payload = raw[_DISTANCE_HEADER.size:]
    if len(payload) != q * g * 4:
        raise ShapeMismatchError(f"{path}: payload {len(payload)} bytes, expected {q * g * 4}")
    values = np.frombuffer(payload, dtype="<f4").reshape(q, g).astype(np.float64)
    stage = Stage.RERANKED if code == 1 else Stage.RAW_COSINE
    params = RerankParams(int(k1), int(k2), float(lam)) if stage == Stage.RERANKED else None
    return DistanceMatrix(values, stage, params)
