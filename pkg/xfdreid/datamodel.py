"""
Data Model Module
Domain types, feature file ingestion, manifest parsing and metadata binning
"""

import csv
import hashlib
import logging
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .exceptions import (
    BadMagicError,
    DegenerateRangeError,
    DimMismatchError,
    DuplicateIndexError,
    InvalidMetadataError,
    MissingColumnError,
    NonFiniteError,
    ShapeMismatchError,
    UnknownDomainError,
    UnknownSplitError,
)


FEATURE_MAGIC = b"XFDF"
FEATURE_VERSION = 1
# magic, version, num_tracklets, T, C
_FEATURE_HEADER = struct.Struct("<4sIIII")
_PAYLOAD_DTYPE = np.dtype("<f4")

MANIFEST_COLUMNS = (
    "tracklet_index", "person_id", "camera_id", "domain", "altitude_m",
    "distance_m", "angle_deg", "split", "has_flip",
)

DEFAULT_SEQ_LEN = 16


class Domain(str, Enum):
    """Camera platform"""
    AERIAL = "aerial"
    GROUND = "ground"


class Split(str, Enum):
    """Dataset partition"""
    TRAIN = "train"
    QUERY = "query"
    GALLERY = "gallery"


@dataclass(frozen=True)
class FrameFeatureSequence:
    """Per-frame embeddings of one tracklet (T rows x C columns)"""

    frames: np.ndarray
    tracklet_index: int

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[0] < 1 or self.frames.shape[1] < 1:
            raise ShapeMismatchError(
                f"tracklet {self.tracklet_index}: frames must be a non-empty T x C matrix, "
                f"got shape {self.frames.shape}")
        if self.tracklet_index < 0:
            raise ValueError("tracklet_index must be non-negative")
        if not np.all(np.isfinite(self.frames)):
            raise NonFiniteError(f"tracklet {self.tracklet_index}: non-finite frame entry")

    @property
    def seq_len(self):
        return self.frames.shape[0]

    @property
    def feature_dim(self):
        return self.frames.shape[1]


@dataclass(frozen=True)
class TrackletRecord:
    """Manifest row: identity, camera, domain, split and raw telemetry"""

    tracklet_index: int
    person_id: int
    camera_id: int
    domain: Domain
    split: Split
    altitude_m: float
    distance_m: float
    angle_deg: float
    has_flip: bool = False

    def __post_init__(self):
        if self.person_id < 0 or self.camera_id < 0 or self.tracklet_index < 0:
            raise InvalidMetadataError(
                f"tracklet {self.tracklet_index}: ids must be non-negative")
        if not all(math.isfinite(v) for v in (self.altitude_m, self.distance_m, self.angle_deg)):
            raise InvalidMetadataError(
                f"tracklet {self.tracklet_index}: telemetry must be finite")
        if self.altitude_m < 0 or self.distance_m < 0:
            raise InvalidMetadataError(
                f"tracklet {self.tracklet_index}: altitude/distance must be >= 0")
        if not 0.0 <= self.angle_deg <= 90.0:
            raise InvalidMetadataError(
                f"tracklet {self.tracklet_index}: angle {self.angle_deg} outside [0, 90]")


@dataclass(frozen=True)
class BinRange:
    """Uniform binning of one telemetry attribute"""

    min_value: float
    max_value: float
    bins: int

    def __post_init__(self):
        if self.min_value >= self.max_value:
            raise DegenerateRangeError(
                f"bin range [{self.min_value}, {self.max_value}] is empty")
        if self.bins < 1:
            raise DegenerateRangeError("bin count must be >= 1")

    def index(self, value):
        """
        Map a raw value to its bin

        Args:
            value: Raw telemetry value (clamped to the range first)

        Returns:
            int: Bin index in [0, bins)
        """
        clamped = min(max(value, self.min_value), self.max_value)
        width = (self.max_value - self.min_value) / self.bins
        return min(int(math.floor((clamped - self.min_value) / width)), self.bins - 1)


@dataclass(frozen=True)
class BinConfig:
    """Bin ranges for altitude, distance and viewing angle"""

    altitude: BinRange = BinRange(5.0, 120.0, 18)
    distance: BinRange = BinRange(10.0, 120.0, 18)
    angle: BinRange = BinRange(0.0, 90.0, 3)


@dataclass(frozen=True)
class MetadataBins:
    altitude_bin: int
    distance_bin: int
    angle_bin: int


@dataclass
class Dataset:
    """Manifest records with their frame features (indexed by tracklet_index)"""

    records: List[TrackletRecord]
    features: List[FrameFeatureSequence]
    feature_dim: int
    seq_len: int
    flipped_features: Optional[List[FrameFeatureSequence]] = None
    _by_index: Dict[int, TrackletRecord] = field(init=False, repr=False)

    def __post_init__(self):
        self._by_index = {}
        for record in self.records:
            if record.tracklet_index in self._by_index:
                raise DuplicateIndexError(f"tracklet_index {record.tracklet_index} repeated")
            if record.tracklet_index >= len(self.features):
                raise ShapeMismatchError(
                    f"tracklet_index {record.tracklet_index} beyond the "
                    f"{len(self.features)} sequences of the feature file")
            self._by_index[record.tracklet_index] = record

        for seq in self.features:
            if seq.frames.shape != (self.seq_len, self.feature_dim):
                raise ShapeMismatchError(
                    f"tracklet {seq.tracklet_index}: shape {seq.frames.shape}, "
                    f"expected {(self.seq_len, self.feature_dim)}")

        if self.flipped_features is not None:
            if len(self.flipped_features) != len(self.features):
                raise ShapeMismatchError("flipped features not aligned with features")
            for seq in self.flipped_features:
                if seq.frames.shape != (self.seq_len, self.feature_dim):
                    raise ShapeMismatchError(
                        f"flipped tracklet {seq.tracklet_index}: shape {seq.frames.shape}")
            unmarked = sum(not r.has_flip for r in self.records)
            if unmarked:
                logging.warning(f"[DATA] {unmarked} tracklets have has_flip=0 but flipped "
                                f"features were given")
        else:
            marked = sum(r.has_flip for r in self.records)
            if marked:
                logging.warning(f"[DATA] {marked} tracklets have has_flip=1 but no flipped "
                                f"features were given")

        query_ids = set(self.person_ids(Split.QUERY))
        gallery_ids = set(self.person_ids(Split.GALLERY))
        missing = sorted(query_ids - gallery_ids)
        if missing:
            logging.warning(f"[DATA] {len(missing)} query identities absent from gallery: "
                            f"{missing[:10]}")

    def record(self, tracklet_index):
        return self._by_index[tracklet_index]

    def records_for(self, split, domain=None):
        """Records of one split, optionally restricted to one domain (manifest order)"""
        return [r for r in self.records
                if r.split == split and (domain is None or r.domain == domain)]

    def person_ids(self, split):
        return sorted({r.person_id for r in self.records if r.split == split})

    def frame_tensor(self, records):
        """Stack the frames of the given records into an (N, T, C) array"""
        if not records:
            return np.zeros((0, self.seq_len, self.feature_dim))
        return np.stack([self.features[r.tracklet_index].frames for r in records])


def write_feature_file(path, sequences):
    """
    Write sequences into the XFDF binary container

    Args:
        path: Output file path
        sequences: FrameFeatureSequence list (or T x C arrays), all of equal shape
    """
    arrays = [s.frames if isinstance(s, FrameFeatureSequence) else np.asarray(s)
              for s in sequences]
    if arrays:
        seq_len, feature_dim = arrays[0].shape
    else:
        seq_len, feature_dim = DEFAULT_SEQ_LEN, 1
    for a in arrays:
        if a.shape != (seq_len, feature_dim):
            raise ShapeMismatchError(f"sequence shape {a.shape}, expected {(seq_len, feature_dim)}")

    header = _FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, len(arrays),
                                  seq_len, feature_dim)
    payload = (np.stack(arrays).astype(_PAYLOAD_DTYPE).tobytes() if arrays else b"")
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)
    logging.debug(f"[DATA] Wrote {len(arrays)} sequences ({seq_len}x{feature_dim}) to {path}")


def read_feature_file(path, dtype=np.float64):
    """
    Read an XFDF feature file

    Args:
        path: Feature file path
        dtype: In-memory floating dtype (float32 or float64)

    Returns:
        tuple: (feature_dim, seq_len, list of FrameFeatureSequence)
    """
    raw = Path(path).read_bytes()
    if len(raw) < _FEATURE_HEADER.size or raw[:4] != FEATURE_MAGIC:
        raise BadMagicError(f"{path}: not a feature file (magic {raw[:4]!r})")

    magic, version, count, seq_len, feature_dim = _FEATURE_HEADER.unpack_from(raw)
    if version != FEATURE_VERSION:
        raise BadMagicError(f"{path}: unsupported version {version}")

    payload = raw[_FEATURE_HEADER.size:]
    expected = count * seq_len * feature_dim * _PAYLOAD_DTYPE.itemsize
    if len(payload) != expected:
        raise ShapeMismatchError(
            f"{path}: payload is {len(payload)} bytes, header implies {expected}")

    values = np.frombuffer(payload, dtype=_PAYLOAD_DTYPE)
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"{path}: payload contains NaN/Inf")

    block = values.reshape(count, seq_len, feature_dim).astype(dtype)
    sequences = [FrameFeatureSequence(block[i], i) for i in range(count)]
    logging.info(f"[DATA] Loaded {count} tracklets (T={seq_len}, C={feature_dim}) from {path}")
    return feature_dim, seq_len, sequences


def _parse_bool(token):
    token = token.strip().lower()
    if token in ("1", "true", "yes"):
        return True
    if token in ("0", "false", "no", ""):
        return False
    raise InvalidMetadataError(f"bad boolean token {token!r}")


def _parse_row(row, line_no):
    if None in row or any(row[c] is None for c in MANIFEST_COLUMNS):
        raise InvalidMetadataError(
            f"line {line_no}: expected {len(MANIFEST_COLUMNS)} fields")
    domain_token = row["domain"].strip().lower()
    try:
        domain = Domain(domain_token)
    except ValueError:
        raise UnknownDomainError(f"line {line_no}: unknown domain {row['domain']!r}") from None

    split_token = row["split"].strip().lower()
    try:
        split = Split(split_token)
    except ValueError:
        raise UnknownSplitError(f"line {line_no}: unknown split {row['split']!r}") from None

    try:
        return TrackletRecord(
            tracklet_index=int(row["tracklet_index"]),
            person_id=int(row["person_id"]),
            camera_id=int(row["camera_id"]),
            domain=domain,
            split=split,
            altitude_m=float(row["altitude_m"]),
            distance_m=float(row["distance_m"]),
            angle_deg=float(row["angle_deg"]),
            has_flip=_parse_bool(row["has_flip"]),
        )
    except ValueError as e:
        raise InvalidMetadataError(f"line {line_no}: {e}") from None


def parse_manifest(path):
    """
    Parse a tracklet manifest CSV

    Args:
        path: UTF-8 CSV with header row

    Returns:
        list: TrackletRecord per data row, in file order
    """
    records = []
    seen = set()
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        header = [h.strip() for h in (reader.fieldnames or [])]
        missing = [c for c in MANIFEST_COLUMNS if c not in header]
        if missing:
            raise MissingColumnError(f"{path}: missing columns {missing}")
        reader.fieldnames = header

        for line_no, row in enumerate(reader, start=2):
            record = _parse_row(row, line_no)
            if record.tracklet_index in seen:
                raise DuplicateIndexError(
                    f"{path}:{line_no}: tracklet_index {record.tracklet_index} repeated")
            seen.add(record.tracklet_index)
            records.append(record)

    logging.info(f"[DATA] Parsed {len(records)} manifest rows from {path}")
    return records


def write_manifest(path, records):
    """Write records as a manifest CSV (inverse of parse_manifest)"""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_COLUMNS)
        for r in records:
            writer.writerow([r.tracklet_index, r.person_id, r.camera_id, r.domain.value,
                             repr(r.altitude_m), repr(r.distance_m), repr(r.angle_deg),
                             r.split.value, int(r.has_flip)])


def discretize_metadata(record, config=None):
    """
    Discretize altitude, distance and angle into uniform bins

    Args:
        record: TrackletRecord
        config: BinConfig (defaults: 18 altitude, 18 distance, 3 angle bins)

    Returns:
        MetadataBins
    """
    config = config or BinConfig()
    return MetadataBins(
        altitude_bin=config.altitude.index(record.altitude_m),
        distance_bin=config.distance.index(record.distance_m),
        angle_bin=config.angle.index(record.angle_deg),
    )


def discretize_all(records, config=None):
    """Bins for every record, keyed by tracklet_index"""
    return {r.tracklet_index: discretize_metadata(r, config) for r in records}


def load_dataset(features_path, manifest_path, flipped_path=None, dtype=np.float64):
    """
    Load features, manifest and optional flipped features into a Dataset

    Args:
        features_path: XFDF feature file
        manifest_path: Manifest CSV
        flipped_path: Optional XFDF file of flipped-sequence embeddings
        dtype: In-memory floating dtype

    Returns:
        Dataset
    """
    feature_dim, seq_len, features = read_feature_file(features_path, dtype)
    records = parse_manifest(manifest_path)

    flipped = None
    if flipped_path is not None:
        flip_dim, flip_len, flipped = read_feature_file(flipped_path, dtype)
        if (flip_dim, flip_len, len(flipped)) != (feature_dim, seq_len, len(features)):
            raise ShapeMismatchError(
                f"{flipped_path}: shape ({len(flipped)}, {flip_len}, {flip_dim}) does not match "
                f"features ({len(features)}, {seq_len}, {feature_dim})")

    return Dataset(records=records, features=features, feature_dim=feature_dim,
                   seq_len=seq_len, flipped_features=flipped)


def check_same_dim(a, b, what="vectors"):
    if np.shape(a) != np.shape(b):
        raise DimMismatchError(f"{what}: shapes {np.shape(a)} and {np.shape(b)} differ")


def file_sha256(paths):
    """
    Content hash of input files (provenance of artifacts)

    Args:
        paths: Iterable of file paths (None entries skipped)

    Returns:
        str: Hex digest over the concatenated file contents in the given order
    """
    digest = hashlib.sha256()
    for p in paths:
        if p is None:
            continue
        digest.update(Path(p).read_bytes())
    return digest.hexdigest()
