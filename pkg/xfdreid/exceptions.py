"""
Error Types Module
Domain errors raised across the re-identification engine
"""


class XfdReidError(Exception):
    """Base class for all domain errors (mapped to exit code 1 by the CLI)"""


# Data ingestion
class BadMagicError(XfdReidError):
    """File does not start with the expected magic header"""


class ShapeMismatchError(XfdReidError):
    """Payload or tensor shape disagrees with its declaration"""


class NonFiniteError(XfdReidError):
    """NaN or Inf found where only finite values are allowed"""


class UnknownDomainError(XfdReidError):
    """Manifest domain token is not aerial/ground"""


class UnknownSplitError(XfdReidError):
    """Manifest split token is not train/query/gallery"""


class DuplicateIndexError(XfdReidError):
    """Two manifest rows share one tracklet_index"""


class MissingColumnError(XfdReidError):
    """Manifest header lacks a required column"""


class InvalidMetadataError(XfdReidError):
    """Telemetry value outside its physical domain"""


class DegenerateRangeError(XfdReidError):
    """Bin range with min >= max"""


# Pooling
class DimMismatchError(XfdReidError):
    """Vector or matrix dimensions do not agree"""


class StaleCacheError(XfdReidError):
    """Backward pass without a matching forward pass"""


class TooFewChannelsError(XfdReidError):
    """Instance norm needs at least two channels"""


class ZeroVectorError(XfdReidError):
    """Cannot normalize a zero vector"""


# Training
class LabelOutOfRangeError(XfdReidError):
    """Class label outside [0, num_ids)"""


class DegenerateBatchError(XfdReidError):
    """Batch has no anchor with both a positive and a negative"""


class EmptyBatchError(XfdReidError):
    """Batch has no samples"""


class TooFewIdentitiesError(XfdReidError):
    """Fewer identities than identities-per-batch"""


class EpochOutOfRangeError(XfdReidError):
    """Epoch outside [0, max_epochs)"""


class FrozenGroupError(XfdReidError):
    """Learning rate queried for a frozen parameter group"""


class InvalidConfigError(XfdReidError):
    """Configuration value violates its invariant"""


# Retrieval
class TooFewElementsError(XfdReidError):
    """Combined query+gallery set not larger than k1"""


class DegenerateKError(XfdReidError):
    """Re-ranking neighbourhood sizes inconsistent (k2 > k1 or k < 1)"""


# Evaluation
class EmptyProtocolError(XfdReidError):
    """No queries or no gallery after protocol filtering"""


class NoRelevantError(XfdReidError):
    """Query has no valid match in the gallery"""


class AllEmptyError(XfdReidError):
    """No protocol has any query"""


class UsageError(XfdReidError):
    """Bad command-line usage"""
