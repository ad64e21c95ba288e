from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from ..signals import SensorSample


@dataclass(frozen=True)
class ClientDataset:
    """One user's local data. ``*_ids`` are dataset-wide sample identities."""

    user_id: str
    train: Tuple[SensorSample, ...]
    test: Tuple[SensorSample, ...] = ()
    train_ids: Tuple[int, ...] = ()
    test_ids: Tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "train", tuple(self.train))
        object.__setattr__(self, "test", tuple(self.test))
        if not self.train_ids:
            object.__setattr__(self, "train_ids", tuple(range(len(self.train))))
        if not self.test_ids:
            object.__setattr__(self, "test_ids", tuple(range(len(self.train), len(self.train) + len(self.test))))
        object.__setattr__(self, "train_ids", tuple(self.train_ids))
        object.__setattr__(self, "test_ids", tuple(self.test_ids))
        if len(self.train_ids) != len(self.train) or len(self.test_ids) != len(self.test):
            raise ValueError("sample ids must align with samples")
        if set(self.train_ids) & set(self.test_ids):
            raise ValueError(f"user {self.user_id}: train and test share samples")

    @property
    def activities(self) -> Tuple[str, ...]:
        """Sorted local activity set; local label ``i`` is ``activities[i]``."""
        return tuple(sorted({s.activity for s in self.train + self.test}))

    def labels(self, split: str = "train") -> np.ndarray:
        index = {a: i for i, a in enumerate(self.activities)}
        return np.array([index[s.activity] for s in getattr(self, split)], dtype=np.int64)

    def global_labels(self, vocabulary: Sequence[str], split: str = "train") -> np.ndarray:
        index = {a: i for i, a in enumerate(vocabulary)}
        return np.array([index[s.activity] for s in getattr(self, split)], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.train) + len(self.test)


@dataclass(frozen=True)
class FederationSplit:
    meta_train: Tuple[ClientDataset, ...]
    meta_test: Tuple[ClientDataset, ...]
    vocabulary: Tuple[str, ...]

    def __post_init__(self):
        ids_a = {u.user_id for u in self.meta_train}
        ids_b = {u.user_id for u in self.meta_test}
        if ids_a & ids_b:
            raise ValueError(f"users in both splits: {sorted(ids_a & ids_b)}")
        seen = set()
        for u in self.meta_train + self.meta_test:
            seen.update(u.activities)
        missing = seen - set(self.vocabulary)
        if missing:
            raise ValueError(f"activities outside the vocabulary: {sorted(missing)}")
