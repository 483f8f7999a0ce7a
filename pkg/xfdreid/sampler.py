"""
Identity Sampler Module
P identities x K tracklets batches for metric learning
"""

import logging
from collections import defaultdict

import numpy as np

from .exceptions import TooFewIdentitiesError


class PKSampler:
    """Deterministic P x K batch sampler over the train split"""

    def __init__(self, records, ids_per_batch=12, instances_per_id=4, seed=0):
        """
        Initialize sampler

        Args:
            records: TrackletRecord list (train split)
            ids_per_batch: P
            instances_per_id: K (identities with fewer tracklets are drawn with replacement)
            seed: Base seed; epoch e uses the stream seeded by (seed, e)
        """
        self.ids_per_batch = ids_per_batch
        self.instances_per_id = instances_per_id
        self.seed = seed

        self.index_by_id = defaultdict(list)
        for r in records:
            self.index_by_id[r.person_id].append(r.tracklet_index)
        self.person_ids = sorted(self.index_by_id)

        if len(self.person_ids) < ids_per_batch:
            raise TooFewIdentitiesError(
                f"{len(self.person_ids)} identities, need at least P={ids_per_batch}")

        logging.info(f"[SAMPLER] {len(self.person_ids)} ids, P={ids_per_batch}, "
                     f"K={instances_per_id} -> batch {self.batch_size}, "
                     f"{self.batches_per_epoch} batches/epoch")

    @property
    def batch_size(self):
        return self.ids_per_batch * self.instances_per_id

    @property
    def batches_per_epoch(self):
        return len(self.person_ids) // self.ids_per_batch

    def epoch_batches(self, epoch):
        """
        Batches of one epoch

        Args:
            epoch: Epoch number (part of the RNG seed)

        Returns:
            list: Batches, each a list of P*K tracklet indices grouped by identity
        """
        rng = np.random.default_rng([self.seed, epoch])
        order = rng.permutation(len(self.person_ids))

        batches = []
        for b in range(self.batches_per_epoch):
            batch = []
            for pos in order[b * self.ids_per_batch:(b + 1) * self.ids_per_batch]:
                pool = self.index_by_id[self.person_ids[pos]]
                replace = len(pool) < self.instances_per_id
                picks = rng.choice(len(pool), size=self.instances_per_id, replace=replace)
                batch.extend(pool[i] for i in picks)
            batches.append(batch)
        return batches
