"""Heterogeneity demonstration: PCA of handcrafted features plus Central / FedAvg-User / FedAvg-Shuffle traces."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from sklearn.metrics import silhouette_score

from ..data import ClientDataset, shuffle_redistribute, vocabulary_of
from ..federation import ClientState, LocalConfig, Scheme, ServerState, init_global_params, run_rounds, train_central
from ..model import ClassifierGraph, EmbeddingGraph, EmbeddingHyper
from ..signals import handcrafted, pca_project
from ..training import ClientTensors, derive_rng, predict, prepare_client


@dataclass
class PcaPoint:
    user: str
    activity: str
    x: float
    y: float


@dataclass
class TracePoint:
    setting: str     # central | fedavg_user | fedavg_shuffle
    unit: str        # "epoch" for central, "round" for the federated settings
    step: int
    accuracy: float


@dataclass
class HeterogeneityDemo:
    points: List[PcaPoint] = field(default_factory=list)
    traces: List[TracePoint] = field(default_factory=list)

    def final(self, setting: str) -> float:
        return [t for t in self.traces if t.setting == setting][-1].accuracy

    def trace(self, setting: str) -> List[TracePoint]:
        return [t for t in self.traces if t.setting == setting]

    def user_silhouette(self) -> float:
        """Mean over activities of the silhouette of the PCA points labelled by user."""
        return user_silhouette(self.points)

    def write_csv(self, out_dir: Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "pca.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["user", "activity", "pc1", "pc2"])
            w.writerows([p.user, p.activity, p.x, p.y] for p in self.points)
        with open(out_dir / "traces.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["setting", "unit", "step", "accuracy"])
            w.writerows([t.setting, t.unit, t.step, t.accuracy] for t in self.traces)


def user_silhouette(points: Sequence[PcaPoint]) -> float:
    scores = []
    for act in sorted({p.activity for p in points}):
        sub = [p for p in points if p.activity == act]
        users = [p.user for p in sub]
        if len(set(users)) < 2 or len(set(users)) >= len(sub):
            continue
        xy = np.array([[p.x, p.y] for p in sub])
        scores.append(silhouette_score(xy, users))
    if not scores:
        raise ValueError("silhouette needs an activity shared by at least two users")
    return float(np.mean(scores))


def pca_points(users: Sequence[ClientDataset]) -> List[PcaPoint]:
    samples = [s for u in users for s in u.train + u.test]
    coords = pca_project(np.stack([handcrafted(s) for s in samples]), 2)
    return [PcaPoint(s.user_id, s.activity, float(c[0]), float(c[1])) for s, c in zip(samples, coords)]


def _global_accuracy(graph: ClassifierGraph, params, data: Sequence[ClientTensors]) -> float:
    hits = total = 0
    for d in data:
        if d.n_test:
            hits += int(np.sum(predict(graph, params, d.x_test) == d.g_test))
            total += d.n_test
    return hits / total


def _fedavg_trace(users, vocab, hyper, rounds, local, subset_size, seed, name) -> List[TracePoint]:
    data = [prepare_client(u, vocab, hyper.k) for u in users]
    graph = ClassifierGraph(EmbeddingGraph(hyper), len(vocab))
    params = init_global_params(hyper, Scheme.FEDAVG, len(vocab), derive_rng(seed, "init"))
    server = ServerState(params, 1.0, seed=seed)
    clients = [ClientState(d, i) for i, d in enumerate(data)]
    _, hist = run_rounds(server, clients, Scheme.FEDAVG, hyper, rounds, subset_size, local,
                         evaluate=lambda p: {"global": _global_accuracy(graph, p, data)})
    return [TracePoint(name, "round", h.round, h.eval["global"]) for h in hist]


def demo_heterogeneity(users: Sequence[ClientDataset], hyper: Optional[EmbeddingHyper] = None,
                       rounds: int = 30, central_epochs: int = 10, local: Optional[LocalConfig] = None,
                       subset_size: Optional[int] = None, seed: int = 0,
                       settings: Sequence[str] = ("central", "fedavg_user", "fedavg_shuffle"),
                       ) -> HeterogeneityDemo:
    """Global accuracy on every user's test split for pooled training, FedAvg over the natural
    per-user partition, and FedAvg after dealing all samples randomly across users."""
    users = list(users)
    if len(users) < 2:
        raise ValueError("the demonstration needs at least two users")
    hyper = hyper or EmbeddingHyper()
    local = local or LocalConfig()
    vocab = vocabulary_of(users)
    demo = HeterogeneityDemo(points=pca_points(users))
    if "central" in settings:
        data = [prepare_client(u, vocab, hyper.k) for u in users]
        graph = ClassifierGraph(EmbeddingGraph(hyper), len(vocab))
        params = init_global_params(hyper, Scheme.CENTRAL, len(vocab), derive_rng(seed, "init"))
        _, hist = train_central(params, hyper, data, central_epochs, local.batch, local.lr,
                                derive_rng(seed, "central"),
                                evaluate=lambda p: {"global": _global_accuracy(graph, p, data)})
        demo.traces += [TracePoint("central", "epoch", h.round, h.eval["global"]) for h in hist]
    if "fedavg_user" in settings:
        demo.traces += _fedavg_trace(users, vocab, hyper, rounds, local, subset_size, seed, "fedavg_user")
    if "fedavg_shuffle" in settings:
        shuffled = shuffle_redistribute(users, derive_rng(seed, "shuffle"))
        demo.traces += _fedavg_trace(shuffled, vocab, hyper, rounds, local, subset_size, seed, "fedavg_shuffle")
    return demo
