"""Server/client round engine: FedReptile meta-training and the FedAvg family."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import nn
from .losses import DEFAULT_SLOPE
from .model import EMBED_PREFIX, HEAD_PREFIX, ClassifierGraph, EmbeddingGraph, EmbeddingHyper, build_head
from .training import ClientTensors, ce_epochs, derive_rng, pairwise_epochs

log = logging.getLogger(__name__)


class Scheme(str, Enum):
    CENTRAL = "central"
    FEDAVG = "fedavg"
    FEDREPTILE = "fedreptile"
    META_HAR = "meta_har"
    META_HAR_CE = "meta_har_ce"

    @property
    def federates_head(self) -> bool:
        return self in (Scheme.FEDAVG, Scheme.FEDREPTILE, Scheme.CENTRAL)

    @property
    def pairwise(self) -> bool:
        return self is Scheme.META_HAR


@dataclass
class LocalConfig:
    epochs: int = 2           # m
    batch: int = 64
    lr: float = 1e-3
    slope: float = DEFAULT_SLOPE
    reset_optimizer: bool = False


@dataclass
class ServerState:
    params: nn.ParamSet
    lam: float = 1.0
    round: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("server step size must lie in [0, 1]")


@dataclass
class ClientState:
    """A client's private state: data, optimizer moments and (meta_har_ce) its own head."""

    data: ClientTensors
    index: int
    opt: Optional[nn.AdamState] = None
    head: Optional[nn.ParamSet] = None

    @property
    def user_id(self) -> str:
        return self.data.user_id


@dataclass
class LocalResult:
    client: int
    params: nn.ParamSet
    loss: float
    n_train: int


def select_clients(n: int, size: int, rng: np.random.Generator) -> List[int]:
    """Uniform sample of ``size`` distinct client indices, returned sorted."""
    if not 1 <= size <= n:
        raise ValueError(f"subset size must be in [1, {n}], got {size}")
    return sorted(rng.choice(n, size=size, replace=False).tolist())


def default_subset_size(n: int) -> int:
    return min(n, max(2, math.ceil(n / 3)))


def init_global_params(hyper: EmbeddingHyper, scheme: Scheme, n_classes: int,
                       rng: np.random.Generator) -> nn.ParamSet:
    """Central parameters: the embedding, plus a vocabulary-wide head when the scheme federates one."""
    params = EmbeddingGraph(hyper).init(rng)
    if scheme.federates_head:
        params = params.merged(build_head(hyper.embed_dim, n_classes, rng).params)
    return params


def local_update(client: ClientState, snapshot: nn.ParamSet, scheme: Scheme, hyper: EmbeddingHyper,
                 cfg: LocalConfig, rng: np.random.Generator, n_classes: Optional[int] = None) -> LocalResult:
    """Train a private copy of ``snapshot`` for ``cfg.epochs`` epochs; the snapshot is not modified."""
    scheme = Scheme(scheme)
    data = client.data
    if client.opt is None or cfg.reset_optimizer:
        client.opt = nn.AdamState(lr=cfg.lr)
    params = snapshot.copy()
    graph = EmbeddingGraph(hyper)
    if scheme is Scheme.META_HAR:
        if data.n_train < 2:
            raise ValueError(f"client {data.user_id}: pairwise training needs >= 2 samples")
        params, losses = pairwise_epochs(graph, params, client.opt, data.x_train, data.y_train,
                                         cfg.epochs, cfg.batch, rng, cfg.slope)
        pushed = params
    elif scheme is Scheme.META_HAR_CE:
        if data.n_train < 1:
            raise ValueError(f"client {data.user_id}: no training data")
        if client.head is None:
            client.head = build_head(hyper.embed_dim, len(data.activities), derive_rng("head", data.user_id)).params
        full = params.merged(client.head)
        full, losses = ce_epochs(ClassifierGraph(graph, len(data.activities)), full, client.opt,
                                 data.x_train, data.y_train, cfg.epochs, cfg.batch, rng)
        client.head = full.select(HEAD_PREFIX)
        pushed = full.select(EMBED_PREFIX)
    elif scheme in (Scheme.FEDAVG, Scheme.FEDREPTILE):
        if data.n_train < 1:
            raise ValueError(f"client {data.user_id}: no training data")
        n_cls = n_classes or snapshot[f"{HEAD_PREFIX}fc.W"].shape[1]
        params, losses = ce_epochs(ClassifierGraph(graph, n_cls), params, client.opt,
                                   data.x_train, data.g_train, cfg.epochs, cfg.batch, rng)
        pushed = params
    else:
        raise ValueError(f"scheme {scheme.value!r} has no federated local update")
    pushed.check_congruent(snapshot)
    return LocalResult(client.index, pushed, float(np.mean(losses)) if losses else float("nan"), data.n_train)


def aggregate(updates: Sequence[nn.ParamSet], central: nn.ParamSet, lam: float = 1.0,
              weights: Optional[Sequence[float]] = None) -> nn.ParamSet:
    """``mean = avg(updates)``; ``central + lam * (mean - central)``.

    With ``lam == 1`` the mean itself is returned, bit for bit.
    """
    if not updates:
        raise ValueError("nothing to aggregate")
    for u in updates:
        central.check_congruent(u)
    avg = nn.params_mean(list(updates), weights)
    if lam == 1.0:
        return avg
    return central + (avg - central).scale(lam)


@dataclass
class RoundRecord:
    round: int
    scheme: str
    clients: List[str]
    train_loss: float
    eval: Dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"round": self.round, "scheme": self.scheme, "clients": self.clients,
                "train_loss": self.train_loss, **{f"acc_{k}": v for k, v in self.eval.items()}}


def run_rounds(server: ServerState, clients: Sequence[ClientState], scheme: Scheme, hyper: EmbeddingHyper,
               rounds: int, subset_size: Optional[int] = None, local: Optional[LocalConfig] = None,
               evaluate: Optional[Callable[[nn.ParamSet], Dict[str, float]]] = None,
               eval_every: int = 1, patience: Optional[int] = None, weighted: bool = False,
               workers: int = 1, on_round: Optional[Callable[[RoundRecord], None]] = None,
               checkpoint: Optional[Callable[[int, nn.ParamSet], None]] = None, checkpoint_every: int = 0,
               ) -> Tuple[ServerState, List[RoundRecord]]:
    """Select, broadcast, train locally, aggregate; repeat ``rounds`` times.

    Client seeds derive from (server seed, round, user id), so results do not
    depend on ``workers``. Early stopping watches ``evaluate(...)["meta_train"]``.
    """
    scheme = Scheme(scheme)
    local = local or LocalConfig()
    size = subset_size or default_subset_size(len(clients))
    select_rng = derive_rng(server.seed, "select")
    for _ in range(server.round):
        select_clients(len(clients), size, select_rng)   # replay selections on resume
    n_classes = server.params[f"{HEAD_PREFIX}fc.W"].shape[1] if scheme.federates_head else None
    history: List[RoundRecord] = []
    best, stale = -np.inf, 0
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for _ in range(rounds):
            r = server.round + 1
            chosen = select_clients(len(clients), size, select_rng)
            snapshot = server.params.copy()

            def work(i):
                c = clients[i]
                try:
                    return local_update(c, snapshot, scheme, hyper, local,
                                        derive_rng(server.seed, r, c.user_id), n_classes)
                except (ValueError, FloatingPointError) as exc:
                    log.warning("round %d: client %s skipped: %s", r, c.user_id, exc)
                    return None

            results = list(pool.map(work, chosen)) if pool else [work(i) for i in chosen]
            results = [res for res in results if res is not None]
            if results:
                results.sort(key=lambda res: res.client)
                weights = [res.n_train for res in results] if weighted else None
                server.params = aggregate([res.params for res in results], server.params, server.lam, weights)
            server.round = r
            rec = RoundRecord(r, scheme.value, [clients[res.client].user_id for res in results],
                              float(np.mean([res.loss for res in results])) if results else float("nan"))
            if evaluate is not None and (r % eval_every == 0 or r == rounds):
                rec.eval = evaluate(server.params)
            history.append(rec)
            if on_round:
                on_round(rec)
            if checkpoint and checkpoint_every and r % checkpoint_every == 0:
                checkpoint(r, server.params)
            if patience and "meta_train" in rec.eval:
                if rec.eval["meta_train"] > best:
                    best, stale = rec.eval["meta_train"], 0
                else:
                    stale += 1
                    if stale >= patience:
                        log.info("early stop at round %d", r)
                        break
    finally:
        if pool:
            pool.shutdown()
    return server, history


def train_central(params: nn.ParamSet, hyper: EmbeddingHyper, data: Sequence[ClientTensors], epochs: int,
                  batch: int, lr: float, rng: np.random.Generator,
                  evaluate: Optional[Callable[[nn.ParamSet], Dict[str, float]]] = None,
                  ) -> Tuple[nn.ParamSet, List[RoundRecord]]:
    """Pooled cross-entropy training over every client's train split (no federation)."""
    x = [np.concatenate([d.x_train[s] for d in data]) for s in range(len(data[0].x_train))]
    y = np.concatenate([d.g_train for d in data])
    n_classes = params[f"{HEAD_PREFIX}fc.W"].shape[1]
    graph = ClassifierGraph(EmbeddingGraph(hyper), n_classes)
    opt = nn.AdamState(lr=lr)
    history = []
    for epoch in range(1, epochs + 1):
        params, losses = ce_epochs(graph, params, opt, x, y, 1, batch, rng)
        rec = RoundRecord(epoch, Scheme.CENTRAL.value, [], losses[0])
        if evaluate is not None:
            rec.eval = evaluate(params)
        history.append(rec)
    return params, history
