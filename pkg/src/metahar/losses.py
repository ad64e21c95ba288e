"""Cosine similarity, sigmoid pairwise loss, cross-entropy and pair sampling."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.special import log_expit

DEFAULT_SLOPE = 10.0
CE_FLOOR = 1e-12


class ZeroEmbeddingError(ValueError):
    """An embedding with zero norm reached the cosine similarity."""


def cosine(e_i: np.ndarray, e_j: np.ndarray) -> float:
    e_i = np.asarray(e_i, dtype=np.float64)
    e_j = np.asarray(e_j, dtype=np.float64)
    ni, nj = np.linalg.norm(e_i), np.linalg.norm(e_j)
    if ni == 0.0 or nj == 0.0:
        raise ZeroEmbeddingError("cosine similarity of a zero-norm vector")
    return float(np.clip(e_i @ e_j / (ni * nj), -1.0, 1.0))


def pairwise_loss(phi, delta, slope: float = DEFAULT_SLOPE):
    """``-d*log s(phi) - (1-d)*log(1-s(phi))`` with ``s(x) = 1/(1+exp(-slope*x))``.

    Uses ``log(1 - s(x)) = log s(-x)`` so the loss is symmetric under
    ``(phi, d) -> (-phi, 1-d)`` bit for bit.
    """
    if slope <= 0:
        raise ValueError("sigmoid slope must be positive")
    phi = np.asarray(phi, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    pos = -log_expit(slope * phi)
    neg = -log_expit(-slope * phi)
    out = np.where(delta == 1.0, pos, np.where(delta == 0.0, neg, delta * pos + (1 - delta) * neg))
    return float(out) if out.ndim == 0 else out


def pairwise_loss_grad(phi, delta, slope: float = DEFAULT_SLOPE):
    """d loss / d phi = slope * (s(phi) - delta)."""
    phi = np.asarray(phi, dtype=np.float64)
    s = 1.0 / (1.0 + np.exp(-slope * phi))
    return slope * (s - np.asarray(delta, dtype=np.float64))


def pair_batch_loss(e_a: np.ndarray, e_b: np.ndarray, delta: np.ndarray,
                    slope: float = DEFAULT_SLOPE) -> Tuple[float, np.ndarray, np.ndarray]:
    """Mean pairwise loss over rows and its gradients w.r.t. both embedding batches."""
    na = np.linalg.norm(e_a, axis=1)
    nb = np.linalg.norm(e_b, axis=1)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise ZeroEmbeddingError("zero-norm embedding in pair batch")
    ua, ub = e_a / na[:, None], e_b / nb[:, None]
    phi = np.sum(ua * ub, axis=1)
    n = len(phi)
    loss = float(np.mean(pairwise_loss(phi, delta, slope)))
    dphi = pairwise_loss_grad(phi, delta, slope) / n
    # d phi / d e_a = (u_b - phi u_a) / |e_a|
    ga = dphi[:, None] * (ub - phi[:, None] * ua) / na[:, None]
    gb = dphi[:, None] * (ua - phi[:, None] * ub) / nb[:, None]
    return loss, ga, gb


def cross_entropy(p: np.ndarray, q: np.ndarray) -> float:
    """``-sum p log q`` with q floored at 1e-12."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
    return float(-np.sum(p * np.log(np.maximum(q, CE_FLOOR))))


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``) and d/d logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    idx = np.arange(n)
    loss = float(-np.mean(logp[idx, labels]))
    grad = np.exp(logp)
    grad[idx, labels] -= 1.0
    return loss, grad / n


@dataclass
class PairBatch:
    first: np.ndarray      # sample indices
    second: np.ndarray
    label_first: np.ndarray
    label_second: np.ndarray

    @property
    def same(self) -> np.ndarray:
        return (self.label_first == self.label_second).astype(np.float64)

    def __len__(self) -> int:
        return len(self.first)


def sample_pairs(labels: np.ndarray, batch: int, rng: np.random.Generator) -> PairBatch:
    """Draw ``batch`` index pairs, each positive with probability 1/2.

    The anchor is uniform over samples. Positives take a different sample of
    the anchor's class when one exists; negatives take a uniform sample of
    another class. Without any other class every pair is positive.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if n < 2:
        raise ValueError("pair sampling needs at least two samples")
    if batch < 1:
        raise ValueError("batch must be >= 1")
    by_class = {c: np.flatnonzero(labels == c) for c in np.unique(labels)}
    others_of = {c: np.flatnonzero(labels != c) for c in by_class}
    anchors = rng.integers(0, n, size=batch)
    want_pos = rng.random(batch) < 0.5
    partners = np.empty(batch, dtype=np.int64)
    for t, (a, pos) in enumerate(zip(anchors, want_pos)):
        same = by_class[labels[a]]
        if pos or len(same) == n:
            if len(same) > 1:
                j = same[rng.integers(0, len(same) - 1)]
                partners[t] = j if j != a else same[-1]
            else:
                partners[t] = a
        else:
            others = others_of[labels[a]]
            partners[t] = others[rng.integers(0, len(others))]
    return PairBatch(anchors, partners, labels[anchors], labels[partners])
