"""Shared fixtures for xfdreid tests.

All data is synthetic and seeded; no backbone or real dataset is needed.
"""

import numpy as np
import pytest

from xfdreid.config import LossWeights, OptimizerConfig, SamplerConfig, ScheduleConfig, TrainConfig
from xfdreid.datamodel import Dataset, Domain, FrameFeatureSequence, Split, TrackletRecord
from xfdreid.synthfix import FixtureConfig, generate


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: qualitative training runs (deselect with -m 'not slow')")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_record():
    """Factory for manifest records with valid telemetry."""
    def _make(index, person_id, split=Split.GALLERY, domain=Domain.AERIAL, camera_id=None):
        return TrackletRecord(
            tracklet_index=index,
            person_id=person_id,
            camera_id=index if camera_id is None else camera_id,
            domain=domain,
            split=split,
            altitude_m=40.0 if domain == Domain.AERIAL else 1.5,
            distance_m=60.0,
            angle_deg=45.0 if domain == Domain.AERIAL else 10.0,
        )
    return _make


@pytest.fixture
def make_dataset():
    """Factory: Dataset from records with seeded random frames."""
    def _make(records, seq_len=4, feature_dim=8, seed=0):
        rng = np.random.default_rng(seed)
        features = [FrameFeatureSequence(rng.standard_normal((seq_len, feature_dim)), i)
                    for i in range(len(records))]
        return Dataset(records=list(records), features=features, feature_dim=feature_dim,
                       seq_len=seq_len)
    return _make


@pytest.fixture
def unit_rows():
    def _unit(rng, n, dim):
        x = rng.standard_normal((n, dim))
        return x / np.linalg.norm(x, axis=1, keepdims=True)
    return _unit


@pytest.fixture
def small_fixture():
    """8 identities, 6 tracklets each (2 train / 2 query / 2 gallery), T=4, C=8."""
    return generate(FixtureConfig(num_ids=8, tracklets_per_id=6, seq_len=4, feature_dim=8,
                                  cluster_spread=0.2, domain_offset=0.2, seed=3))


@pytest.fixture
def fast_train_config():
    """A few quick epochs on the small fixture."""
    def _make(max_epochs=3, base_lr=1e-2, pooling_mode="attn", neck_enabled=True, seed=0,
              weights=None, weight_decay=1e-4):
        schedule = ScheduleConfig(base_lr=base_lr, min_lr=0.01 * base_lr, warmup_epochs=0,
                                  max_epochs=max_epochs)
        return TrainConfig(
            schedule=schedule,
            sampler=SamplerConfig(4, 2),
            optimizer=OptimizerConfig(weight_decay=weight_decay, weight_decay_bias=weight_decay),
            loss_weights=weights or LossWeights(),
            pooling_mode=pooling_mode,
            neck_enabled=neck_enabled,
            seed=seed,
        )
    return _make
