"""Local training loops shared by federation, personalization and baselines."""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import nn
from .data.types import ClientDataset
from .losses import DEFAULT_SLOPE, pair_batch_loss, sample_pairs, softmax_cross_entropy
from .model import EMBED_PREFIX, HEAD_PREFIX, ClassifierGraph, EmbeddingGraph, EmbeddingHyper
from .signals import Standardizer, preprocess_batch


@dataclass
class ClientTensors:
    """Preprocessed, standardized arrays of one client."""

    user_id: str
    activities: Tuple[str, ...]
    x_train: List[np.ndarray]
    y_train: np.ndarray            # local label indices
    g_train: np.ndarray            # global vocabulary indices
    x_test: List[np.ndarray]
    y_test: np.ndarray
    g_test: np.ndarray

    @property
    def n_train(self) -> int:
        return len(self.y_train)

    @property
    def n_test(self) -> int:
        return len(self.y_test)


def prepare_client(client: ClientDataset, vocabulary: Sequence[str], k: int = 5,
                   standardize: bool = True) -> ClientTensors:
    """Preprocess both splits; standardization statistics come from the train split only."""
    if not client.train:
        raise ValueError(f"client {client.user_id} has no training samples")
    x_tr = preprocess_batch(client.train, k)
    x_te = preprocess_batch(client.test, k) if client.test else [np.zeros((0,) + a.shape[1:]) for a in x_tr]
    if standardize:
        std = Standardizer.fit(x_tr)
        x_tr, x_te = std(x_tr), std(x_te)
    return ClientTensors(client.user_id, client.activities, x_tr, client.labels("train"),
                         client.global_labels(vocabulary, "train"), x_te,
                         client.labels("test") if client.test else np.zeros(0, dtype=np.int64),
                         client.global_labels(vocabulary, "test") if client.test else np.zeros(0, dtype=np.int64))


def take(xs: Sequence[np.ndarray], idx: np.ndarray) -> List[np.ndarray]:
    return [x[idx] for x in xs]


def derive_rng(*keys) -> np.random.Generator:
    """Generator seeded from a stable hash of ``keys`` (ints or strings)."""
    ints = [k if isinstance(k, int) else zlib.crc32(str(k).encode()) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(ints))


def steps_per_epoch(n: int, batch: int) -> int:
    return max(1, math.ceil(n / batch))


def pairwise_epochs(graph: EmbeddingGraph, params: nn.ParamSet, opt: nn.AdamState,
                    x: Sequence[np.ndarray], labels: np.ndarray, epochs: int, batch: int,
                    rng: np.random.Generator, slope: float = DEFAULT_SLOPE) -> Tuple[nn.ParamSet, List[float]]:
    """Siamese training: both members of each pair go through the same weights in one
    batched forward, so the backward pass sums the two branch contributions."""
    losses = []
    n = len(labels)
    if n < 2:
        return params, losses
    for _ in range(epochs):
        epoch_loss = []
        for _ in range(steps_per_epoch(n, batch)):
            pairs = sample_pairs(labels, batch, rng)
            both = np.concatenate([pairs.first, pairs.second])
            emb, tape = nn.forward(graph, params, take(x, both), mode="train", rng=rng)
            b = len(pairs)
            loss, ga, gb = pair_batch_loss(emb[:b], emb[b:], pairs.same, slope)
            grads = nn.backward(tape, np.concatenate([ga, gb]))
            params, opt = nn.adam_step(params, grads, opt)
            epoch_loss.append(loss)
        losses.append(float(np.mean(epoch_loss)))
    return params, losses


def ce_epochs(graph: ClassifierGraph, params: nn.ParamSet, opt: nn.AdamState,
              x: Sequence[np.ndarray], labels: np.ndarray, epochs: int, batch: int,
              rng: np.random.Generator, trainable: Optional[Sequence[str]] = None) -> Tuple[nn.ParamSet, List[float]]:
    """Mini-batch cross-entropy over shuffled epochs. ``trainable`` restricts updates."""
    losses = []
    n = len(labels)
    if n < 1:
        return params, losses
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_loss = []
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            logits, tape = nn.forward(graph, params, take(x, idx), mode="train", rng=rng)
            loss, dlogits = softmax_cross_entropy(logits, labels[idx])
            grads = nn.backward(tape, dlogits)
            if trainable is not None:
                grads = grads.subset(trainable)
            params, opt = nn.adam_step(params, grads, opt)
            epoch_loss.append(loss)
        losses.append(float(np.mean(epoch_loss)))
    return params, losses


def head_epochs(head_params: nn.ParamSet, opt: nn.AdamState, emb: np.ndarray, labels: np.ndarray,
                epochs: int, batch: int, rng: np.random.Generator) -> Tuple[nn.ParamSet, List[float]]:
    """Train only the dense head on fixed embeddings (frozen embedding network)."""
    head = nn.Dense(f"{HEAD_PREFIX}fc", emb.shape[1], head_params[f"{HEAD_PREFIX}fc.W"].shape[1])
    losses = []
    n = len(labels)
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_loss = []
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            logits, tape = nn.forward(head, head_params, emb[idx], mode="train")
            loss, dlogits = softmax_cross_entropy(logits, labels[idx])
            head_params, opt = nn.adam_step(head_params, nn.backward(tape, dlogits), opt)
            epoch_loss.append(loss)
        losses.append(float(np.mean(epoch_loss)))
    return head_params, losses


def predict(graph: ClassifierGraph, params: nn.ParamSet, x: Sequence[np.ndarray],
            batch: int = 256) -> np.ndarray:
    n = x[0].shape[0]
    out = []
    for start in range(0, n, batch):
        logits, _ = nn.forward(graph, params, [a[start:start + batch] for a in x], mode="eval")
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def embed_all(graph: EmbeddingGraph, params: nn.ParamSet, x: Sequence[np.ndarray], batch: int = 256) -> np.ndarray:
    n = x[0].shape[0]
    out = []
    for start in range(0, n, batch):
        e, _ = nn.forward(graph, params, [a[start:start + batch] for a in x], mode="eval")
        out.append(e)
    return np.concatenate(out) if out else np.zeros((0, graph.hyper.embed_dim))


def accuracy(pred: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(pred == labels))
