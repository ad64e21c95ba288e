"""Client construction, Non-IID label removal, redistribution and user splits."""
from __future__ import annotations

import json
import math
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from ..signals import SensorSample
from .types import ClientDataset, FederationSplit


def stratified_split(labels: Sequence[str], rng: np.random.Generator,
                     train_frac: float = 0.8) -> Tuple[np.ndarray, np.ndarray]:
    """Per-activity shuffle; each activity puts ``round(train_frac * n)`` samples in train."""
    labels = np.asarray(labels)
    train, test = [], []
    for act in sorted(set(labels.tolist())):
        idx = np.flatnonzero(labels == act)
        idx = idx[rng.permutation(len(idx))]
        n_train = int(math.floor(train_frac * len(idx) + 0.5))
        train.extend(idx[:n_train].tolist())
        test.extend(idx[n_train:].tolist())
    return np.array(sorted(train), dtype=np.int64), np.array(sorted(test), dtype=np.int64)


def make_clients(samples: Sequence[SensorSample], rng: np.random.Generator,
                 train_frac: float = 0.8, id_offset: int = 0) -> List[ClientDataset]:
    """Group samples by user (sorted ids) and split each user's data 80/20 per activity."""
    by_user: Dict[str, List[int]] = defaultdict(list)
    for i, s in enumerate(samples):
        by_user[s.user_id].append(i)
    clients = []
    for user in sorted(by_user):
        idx = by_user[user]
        tr, te = stratified_split([samples[i].activity for i in idx], rng, train_frac)
        clients.append(ClientDataset(
            user,
            tuple(samples[idx[j]] for j in tr), tuple(samples[idx[j]] for j in te),
            tuple(id_offset + idx[j] for j in tr), tuple(id_offset + idx[j] for j in te)))
    return clients


def drop_activities(client: ClientDataset, removed: Sequence[str]) -> ClientDataset:
    gone = set(removed)
    tr = [(s, i) for s, i in zip(client.train, client.train_ids) if s.activity not in gone]
    te = [(s, i) for s, i in zip(client.test, client.test_ids) if s.activity not in gone]
    return ClientDataset(client.user_id, tuple(s for s, _ in tr), tuple(s for s, _ in te),
                         tuple(i for _, i in tr), tuple(i for _, i in te))


def non_iid_partition(users: Sequence[ClientDataset], rng: np.random.Generator,
                      max_remove: int = 2) -> List[ClientDataset]:
    """Remove ``r ~ U{0..max_remove}`` uniformly chosen activities from each user.

    A draw that would leave no activity is redrawn.
    """
    out = []
    for user in users:
        acts = user.activities
        while True:
            r = int(rng.integers(0, max_remove + 1))
            if len(acts) - r >= 1:
                break
        removed = rng.choice(len(acts), size=r, replace=False) if r else []
        out.append(drop_activities(user, [acts[i] for i in removed]))
    return out


def shuffle_redistribute(users: Sequence[ClientDataset], rng: np.random.Generator) -> List[ClientDataset]:
    """Pool every user's samples and deal them back at random, keeping per-user
    train and test counts."""
    if len(users) < 2:
        raise ValueError("redistribution needs at least two users")

    def deal(split: str):
        pool = [(s, i) for u in users for s, i in zip(getattr(u, split), getattr(u, f"{split}_ids"))]
        perm = rng.permutation(len(pool))
        pool = [pool[p] for p in perm]
        parts, pos = [], 0
        for u in users:
            n = len(getattr(u, split))
            parts.append(pool[pos:pos + n])
            pos += n
        return parts

    trains, tests = deal("train"), deal("test")
    out = []
    for u, tr, te in zip(users, trains, tests):
        # the dealt samples keep their original user_id field; ownership is the client's
        out.append(ClientDataset(u.user_id, tuple(s for s, _ in tr), tuple(s for s, _ in te),
                                 tuple(i for _, i in tr), tuple(i for _, i in te)))
    return out


def vocabulary_of(users: Sequence[ClientDataset]) -> Tuple[str, ...]:
    acts = set()
    for u in users:
        acts.update(u.activities)
    return tuple(sorted(acts))


def split_meta(users: Sequence[ClientDataset], n_test: int, rng: np.random.Generator,
               vocabulary: Optional[Sequence[str]] = None) -> FederationSplit:
    if not 0 <= n_test < len(users):
        raise ValueError(f"n_test must be in [0, {len(users)}), got {n_test}")
    perm = rng.permutation(len(users))
    test_idx = set(perm[:n_test].tolist())
    meta_train = tuple(u for i, u in enumerate(users) if i not in test_idx)
    meta_test = tuple(u for i, u in enumerate(users) if i in test_idx)
    vocab = tuple(vocabulary) if vocabulary is not None else vocabulary_of(users)
    return FederationSplit(meta_train, meta_test, vocab)


def rename_activities(client: ClientDataset, mapping: Mapping[str, str]) -> ClientDataset:
    def ren(samples):
        return tuple(SensorSample(s.user_id, mapping.get(s.activity, s.activity), s.sensors) for s in samples)

    return ClientDataset(client.user_id, ren(client.train), ren(client.test), client.train_ids, client.test_ids)


def merge_datasets(a: Sequence[ClientDataset], b: Sequence[ClientDataset],
                   overlap: Optional[Mapping[str, str]] = None) -> List[ClientDataset]:
    """Union of two user populations.

    ``overlap`` renames activities of ``b`` onto the names used by ``a`` (the
    shared activities); unmapped names are kept. Sample ids of ``b`` are
    shifted past those of ``a`` so identities stay unique.
    """
    ids_a = {u.user_id for u in a}
    dup = ids_a & {u.user_id for u in b}
    if dup:
        raise ValueError(f"duplicate user ids across datasets: {sorted(dup)}")
    shift = 1 + max((max(u.train_ids + u.test_ids, default=-1) for u in a), default=-1)
    merged = list(a)
    for u in b:
        u = rename_activities(u, overlap or {})
        merged.append(ClientDataset(u.user_id, u.train, u.test,
                                    tuple(i + shift for i in u.train_ids), tuple(i + shift for i in u.test_ids)))
    return merged


def write_manifest(split: FederationSplit, path: Union[str, Path], **extra) -> None:
    """Record which sample ids went where, for reproducibility."""
    def users(us):
        return [{"user_id": u.user_id, "activities": list(u.activities),
                 "train_ids": list(u.train_ids), "test_ids": list(u.test_ids)} for u in us]

    doc = {"vocabulary": list(split.vocabulary), "meta_train": users(split.meta_train),
           "meta_test": users(split.meta_test), **extra}
    Path(path).write_text(json.dumps(doc, indent=2))


def apply_manifest(samples: Sequence[SensorSample], manifest: Union[str, Path, Mapping]) -> FederationSplit:
    doc = manifest if isinstance(manifest, Mapping) else json.loads(Path(manifest).read_text())

    def users(entries):
        return tuple(ClientDataset(e["user_id"], tuple(samples[i] for i in e["train_ids"]),
                                   tuple(samples[i] for i in e["test_ids"]),
                                   tuple(e["train_ids"]), tuple(e["test_ids"])) for e in entries)

    return FederationSplit(users(doc["meta_train"]), users(doc["meta_test"]), tuple(doc["vocabulary"]))


def balance_test(client: ClientDataset, rng: np.random.Generator) -> ClientDataset:
    """Subsample the test split to the same count for every activity present in it."""
    if not client.test:
        return client
    acts = [s.activity for s in client.test]
    counts = {a: acts.count(a) for a in set(acts)}
    n = min(counts.values())
    keep = []
    for a in sorted(counts):
        idx = [i for i, x in enumerate(acts) if x == a]
        keep.extend(sorted(rng.choice(idx, size=n, replace=False).tolist()))
    keep.sort()
    return ClientDataset(client.user_id, client.train, tuple(client.test[i] for i in keep),
                         client.train_ids, tuple(client.test_ids[i] for i in keep))
