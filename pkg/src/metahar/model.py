"""Embedding network (conv stages + two LSTMs) and per-user classifier head."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import nn
from .nn import Context, Var

EMBED_PREFIX = "embed."
HEAD_PREFIX = "head."


@dataclass(frozen=True)
class EmbeddingHyper:
    sensor_axes: Tuple[int, ...] = (3, 3)   # d_g of each sensor, in input order
    k: int = 5
    f: int = 16
    filters: int = 64
    embed_dim: int = 100
    lstm_hidden: Optional[int] = None       # first LSTM width; defaults to embed_dim
    dropout: float = 0.3
    kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "sensor_axes", tuple(int(d) for d in self.sensor_axes))
        if not self.sensor_axes or min(self.sensor_axes) < 1:
            raise ValueError("every sensor needs at least one axis")
        if min(self.k, self.f, self.filters, self.embed_dim) < 1:
            raise ValueError("k, f, filters and embed_dim must be positive")

    @property
    def hidden(self) -> int:
        return self.lstm_hidden or self.embed_dim

    def input_shapes(self) -> List[Tuple[int, int, int]]:
        return [(self.k, 2 * (d + 1), self.f) for d in self.sensor_axes]


class EmbeddingGraph:
    """Differentiable graph mapping per-sensor ``(B, k, 2(d+1), f)`` tensors to ``(B, E)``."""

    def __init__(self, hyper: EmbeddingHyper):
        self.hyper = h = hyper
        fl, kern = h.filters, h.kernel
        self.axis_convs = [nn.Conv1d(f"{EMBED_PREFIX}s{i}.axis_conv", 2, fl, kern)
                           for i in range(len(h.sensor_axes))]
        self.sensor_convs = [nn.Conv2d(f"{EMBED_PREFIX}s{i}.sensor_conv", fl, fl, (kern, kern))
                             for i in range(len(h.sensor_axes))]
        self.fusion = nn.Conv1d(f"{EMBED_PREFIX}fusion_conv", fl * len(h.sensor_axes), fl, kern)
        self.drop = nn.Dropout("drop", h.dropout)
        self.lstm1 = nn.LSTM(f"{EMBED_PREFIX}lstm1", fl * h.f, h.hidden)
        self.lstm2 = nn.LSTM(f"{EMBED_PREFIX}lstm2", h.hidden, h.embed_dim)

    def layers(self):
        return [*self.axis_convs, *self.sensor_convs, self.fusion, self.lstm1, self.lstm2]

    def init(self, rng: np.random.Generator) -> nn.ParamSet:
        items = []
        for layer in self.layers():
            items.extend(layer.init(rng))
        return nn.ParamSet(items)

    def check_inputs(self, xs: Sequence) -> int:
        if len(xs) != len(self.hyper.sensor_axes):
            raise ValueError(f"expected {len(self.hyper.sensor_axes)} sensor tensors, got {len(xs)}")
        batch = None
        for i, (x, want) in enumerate(zip(xs, self.hyper.input_shapes())):
            shape = x.shape if not isinstance(x, Var) else x.data.shape
            if len(shape) != 4 or tuple(shape[1:]) != want:
                raise ValueError(f"sensor {i}: expected (B, {want[0]}, {want[1]}, {want[2]}), got {tuple(shape)}")
            if batch is None:
                batch = shape[0]
            elif shape[0] != batch:
                raise ValueError("sensor tensors disagree on batch size")
        return batch

    def __call__(self, ctx: Context, xs: Sequence[Var]) -> Var:
        h = self.hyper
        b = self.check_inputs(xs)
        fl, f, k = h.filters, h.f, h.k
        per_sensor = []
        for i, (x, d) in enumerate(zip(xs, h.sensor_axes)):
            a = d + 1
            # each axis: its (magnitude, frequency) pair as 2 input channels
            z = nn.reshape(x, (b * k * a, 2, f))
            z = nn.relu(self.axis_convs[i](ctx, z))                     # B*k*a, F, f
            z = nn.transpose(nn.reshape(z, (b * k, a, fl, f)), (0, 2, 1, 3))
            z = nn.relu(self.sensor_convs[i](ctx, z))                   # B*k, F, a, f
            per_sensor.append(nn.mean(z, axis=2))                       # B*k, F, f
        z = per_sensor[0] if len(per_sensor) == 1 else nn.concat(per_sensor, axis=1)
        z = nn.relu(self.fusion(ctx, z))                                # B*k, F, f
        z = nn.reshape(z, (b, k, fl * f))
        z = self.drop(ctx, z)
        z = self.lstm1(ctx, z)
        z = self.drop(ctx, z)
        z = self.lstm2(ctx, z)
        return nn.take_last(z, axis=1)


class ClassifierGraph:
    """Embedding graph followed by a dense head; outputs logits ``(B, n_classes)``."""

    def __init__(self, embedding: EmbeddingGraph, n_classes: int):
        self.embedding = embedding
        self.n_classes = n_classes
        self.head = nn.Dense(f"{HEAD_PREFIX}fc", embedding.hyper.embed_dim, n_classes)

    def __call__(self, ctx: Context, xs) -> Var:
        return self.head(ctx, self.embedding(ctx, xs))


@dataclass
class EmbeddingNet:
    hyper: EmbeddingHyper
    params: nn.ParamSet

    @property
    def graph(self) -> EmbeddingGraph:
        return EmbeddingGraph(self.hyper)


@dataclass
class ClassifierHead:
    params: nn.ParamSet

    @property
    def n_classes(self) -> int:
        return self.params[f"{HEAD_PREFIX}fc.W"].shape[1]


def build_embedding(hyper: EmbeddingHyper, rng: np.random.Generator | int = 0) -> EmbeddingNet:
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    return EmbeddingNet(hyper, EmbeddingGraph(hyper).init(rng))


def build_head(embed_dim: int, n_classes: int, rng: np.random.Generator | int = 0) -> ClassifierHead:
    if n_classes < 1:
        raise ValueError("a head needs at least one class")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    return ClassifierHead(nn.ParamSet(nn.Dense(f"{HEAD_PREFIX}fc", embed_dim, n_classes).init(rng)))


def _as_batch(x) -> Tuple[List[np.ndarray], bool]:
    xs = [np.asarray(a, dtype=np.float64) for a in x]
    single = xs[0].ndim == 3
    if single:
        xs = [a[None] for a in xs]
    return xs, single


def embed(net: EmbeddingNet, x, batch_size: int = 256) -> np.ndarray:
    """Eval-mode embeddings. ``x`` is a FeatureTensor (list of ``(k, C, f)``) or a batch."""
    xs, single = _as_batch(x)
    graph = net.graph
    graph.check_inputs(xs)
    out = []
    n = xs[0].shape[0]
    for start in range(0, n, batch_size):
        chunk = [a[start:start + batch_size] for a in xs]
        e, _ = nn.forward(graph, net.params, chunk, mode="eval")
        out.append(e)
    e = np.concatenate(out) if out else np.zeros((0, net.hyper.embed_dim))
    return e[0] if single else e


def logits(net: EmbeddingNet, head: ClassifierHead, x, batch_size: int = 256) -> np.ndarray:
    xs, single = _as_batch(x)
    graph = ClassifierGraph(net.graph, head.n_classes)
    params = net.params.merged(head.params)
    out = []
    for start in range(0, xs[0].shape[0], batch_size):
        z, _ = nn.forward(graph, params, [a[start:start + batch_size] for a in xs], mode="eval")
        out.append(z)
    z = np.concatenate(out)
    return z[0] if single else z


def classify(net: EmbeddingNet, head: ClassifierHead, x) -> np.ndarray:
    """Class probabilities over the head's activity set."""
    w = head.params[f"{HEAD_PREFIX}fc.W"]
    if w.shape[0] != net.hyper.embed_dim:
        raise ValueError(f"head expects embeddings of size {w.shape[0]}, net produces {net.hyper.embed_dim}")
    return nn.softmax_array(logits(net, head, x))
