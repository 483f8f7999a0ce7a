"""
Synthetic Fixture Module
Deterministic clustered tracklet datasets with domain offset and frame corruption
"""

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.stats import ortho_group

from .datamodel import (
    Dataset,
    Domain,
    FrameFeatureSequence,
    Split,
    TrackletRecord,
    write_feature_file,
    write_manifest,
)
from .exceptions import InvalidConfigError, ShapeMismatchError


# split of the j-th tracklet of an identity; domain alternates aerial / ground
SPLIT_CYCLE = (Split.TRAIN, Split.TRAIN, Split.QUERY, Split.QUERY, Split.GALLERY, Split.GALLERY)
CORRUPTION_COLUMNS = ("tracklet_index", "frame_index", "is_corrupt")


@dataclass(frozen=True)
class FixtureConfig:
    """Shape and difficulty of a synthetic dataset"""

    num_ids: int = 16
    tracklets_per_id: int = 6
    seq_len: int = 16
    feature_dim: int = 32
    cluster_spread: float = 0.1
    tracklet_spread: Optional[float] = None
    shared_component: float = 0.5
    domain_offset: float = 0.3
    corrupt_frac: float = 0.0
    seed: int = 0
    with_flip: bool = False

    def __post_init__(self):
        for name in ("num_ids", "tracklets_per_id", "seq_len", "feature_dim", "seed"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise InvalidConfigError(f"{name} must be an integer, got {value!r}")
        for name in ("num_ids", "tracklets_per_id", "seq_len"):
            if getattr(self, name) < 1:
                raise InvalidConfigError(f"{name} must be >= 1")
        if self.feature_dim < 2:
            raise InvalidConfigError("feature_dim must be >= 2")
        if self.cluster_spread < 0 or (self.tracklet_spread is not None
                                       and self.tracklet_spread < 0):
            raise InvalidConfigError("spreads must be >= 0")
        if not 0.0 <= self.corrupt_frac <= 1.0:
            raise InvalidConfigError(f"corrupt_frac {self.corrupt_frac} outside [0, 1]")
        if not 0.0 <= self.shared_component < 1.0:
            raise InvalidConfigError("shared_component must be in [0, 1)")

    @property
    def effective_tracklet_spread(self):
        return self.cluster_spread if self.tracklet_spread is None else self.tracklet_spread

    @classmethod
    def from_dict(cls, values):
        known = set(cls.__dataclass_fields__)
        if not isinstance(values, dict):
            raise InvalidConfigError("fixture config must be a JSON object")
        unknown = sorted(set(values) - known)
        if unknown:
            raise InvalidConfigError(f"unknown fixture keys {unknown}")
        try:
            return cls(**values)
        except TypeError as e:
            raise InvalidConfigError(f"bad fixture value: {e}") from e

    def to_dict(self):
        return asdict(self)


@dataclass
class SyntheticFixture:
    """Generated dataset plus the per-frame corruption ground truth"""

    dataset: Dataset
    corrupt_mask: np.ndarray
    config: FixtureConfig


def _unit_rows(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _plane_rotation(feature_dim, angle, rng):
    """Rotation by `angle` radians inside a random 2-plane (identity elsewhere)"""
    basis = ortho_group.rvs(dim=feature_dim, random_state=rng)
    u, v = basis[:, 0], basis[:, 1]
    rotation = np.eye(feature_dim)
    rotation += (math.cos(angle) - 1.0) * (np.outer(u, u) + np.outer(v, v))
    rotation += math.sin(angle) * (np.outer(v, u) - np.outer(u, v))
    return rotation


def _telemetry(domain, rng):
    if domain == Domain.AERIAL:
        return rng.uniform(5.0, 120.0), rng.uniform(10.0, 120.0), rng.uniform(30.0, 90.0)
    return rng.uniform(0.0, 3.0), rng.uniform(10.0, 120.0), rng.uniform(0.0, 20.0)


def generate(config):
    """
    Generate a synthetic dataset

    Args:
        config: FixtureConfig

    Returns:
        SyntheticFixture
    """
    rng = np.random.default_rng(config.seed)
    C, T = config.feature_dim, config.seq_len

    # centroids share one common direction, the rest is identity specific
    common = _unit_rows(rng.standard_normal(C))
    specific = _unit_rows(rng.standard_normal((config.num_ids, C)))
    shared = config.shared_component
    centroids = _unit_rows(shared * common + math.sqrt(1.0 - shared ** 2) * specific)
    rotation = _plane_rotation(C, config.domain_offset, rng)

    num_corrupt = int(round(config.corrupt_frac * T))
    noise_scale = 1.0 / math.sqrt(C)
    spread = config.effective_tracklet_spread

    records, features, flipped, masks = [], [], [], []
    for person_id in range(config.num_ids):
        for j in range(config.tracklets_per_id):
            index = len(records)
            domain = Domain.AERIAL if j % 2 == 0 else Domain.GROUND
            split = SPLIT_CYCLE[j % len(SPLIT_CYCLE)]

            center = _unit_rows(centroids[person_id]
                                + spread * noise_scale * rng.standard_normal(C))
            frames = _unit_rows(center + config.cluster_spread * noise_scale
                                * rng.standard_normal((T, C)))
            if domain == Domain.GROUND:
                frames = frames @ rotation.T

            mask = np.zeros(T, dtype=bool)
            if num_corrupt:
                mask[rng.choice(T, size=num_corrupt, replace=False)] = True
                frames[mask] = _unit_rows(rng.standard_normal((num_corrupt, C)))

            altitude, distance, angle = _telemetry(domain, rng)
            records.append(TrackletRecord(
                tracklet_index=index,
                person_id=person_id,
                # one camera per tracklet so no gallery entry is junk
                camera_id=j,
                domain=domain,
                split=split,
                altitude_m=float(round(altitude, 3)),
                distance_m=float(round(distance, 3)),
                angle_deg=float(round(angle, 3)),
                has_flip=config.with_flip,
            ))
            features.append(FrameFeatureSequence(frames, index))
            masks.append(mask)

            if config.with_flip:
                jitter = 0.5 * config.cluster_spread * noise_scale * rng.standard_normal((T, C))
                flip_frames = _unit_rows(frames[::-1] + jitter)
                flipped.append(FrameFeatureSequence(flip_frames, index))

    dataset = Dataset(records=records, features=features, feature_dim=C, seq_len=T,
                      flipped_features=flipped if config.with_flip else None)
    logging.info(f"[SYNTH] {config.num_ids} ids x {config.tracklets_per_id} tracklets, "
                 f"T={T}, C={C}, corrupt {num_corrupt}/{T} frames, "
                 f"domain offset {config.domain_offset:.3f} rad, seed {config.seed}")
    return SyntheticFixture(dataset, np.stack(masks), config)


def write_fixture(fixture, out_dir):
    """
    Write a fixture as on-disk inputs

    Args:
        fixture: SyntheticFixture
        out_dir: Output directory (created if missing)

    Returns:
        dict: Role -> written path ('features', 'manifest', 'corruption', 'flipped')
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = fixture.dataset
    paths = {
        "features": out / "features.xfdf",
        "manifest": out / "manifest.csv",
        "corruption": out / "corruption.csv",
    }
    write_feature_file(paths["features"], dataset.features)
    write_manifest(paths["manifest"], dataset.records)
    if dataset.flipped_features is not None:
        paths["flipped"] = out / "flipped.xfdf"
        write_feature_file(paths["flipped"], dataset.flipped_features)

    with open(paths["corruption"], "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(CORRUPTION_COLUMNS)
        for index, mask in enumerate(fixture.corrupt_mask):
            for t, corrupt in enumerate(mask):
                writer.writerow([index, t, int(corrupt)])

    logging.info(f"[SYNTH] Fixture written to {out}")
    return paths


def read_corruption_sidecar(path):
    """
    Read a corruption sidecar CSV

    Returns:
        np.ndarray: (num_tracklets, T) bool mask, True = corrupted frame
    """
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            rows.append((int(row["tracklet_index"]), int(row["frame_index"]),
                         row["is_corrupt"].strip() == "1"))
    if not rows:
        return np.zeros((0, 0), dtype=bool)
    num_tracklets = max(r[0] for r in rows) + 1
    seq_len = max(r[1] for r in rows) + 1
    if len(rows) != num_tracklets * seq_len:
        raise ShapeMismatchError(f"{path}: {len(rows)} rows, expected "
                                 f"{num_tracklets} x {seq_len}")
    mask = np.zeros((num_tracklets, seq_len), dtype=bool)
    for index, t, corrupt in rows:
        mask[index, t] = corrupt
    return mask
