"""Per-user adaptation of the shared embedding: two-stage, merged and separated strategies."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from . import nn
from .losses import DEFAULT_SLOPE
from .model import EMBED_PREFIX, HEAD_PREFIX, ClassifierGraph, EmbeddingGraph, EmbeddingHyper, build_head
from .training import (ClientTensors, accuracy, ce_epochs, derive_rng, embed_all, head_epochs,
                       pairwise_epochs, predict)

log = logging.getLogger(__name__)

STRATEGIES = ("two_stage", "merged", "separated", "full", "none")


@dataclass
class FinetuneConfig:
    epochs: int = 3
    batch: int = 64
    lr: float = 1e-3
    slope: float = DEFAULT_SLOPE


@dataclass
class PersonalModel:
    theta: nn.ParamSet
    head: nn.ParamSet
    hyper: EmbeddingHyper
    classes: Tuple[str, ...]      # activity names of the head outputs, in order
    strategy: str
    epochs: int

    @property
    def n_classes(self) -> int:
        return self.head[f"{HEAD_PREFIX}fc.W"].shape[1]

    def graph(self) -> ClassifierGraph:
        return ClassifierGraph(EmbeddingGraph(self.hyper), self.n_classes)

    def predict_indices(self, x: Sequence[np.ndarray]) -> np.ndarray:
        return predict(self.graph(), self.theta.merged(self.head), x)

    def predict(self, x: Sequence[np.ndarray]) -> np.ndarray:
        return np.asarray(self.classes, dtype=object)[self.predict_indices(x)]

    def evaluate(self, data: ClientTensors) -> float:
        """Test accuracy on ``data``; refuses a user whose activity set the head cannot express."""
        global_head = self.strategy in ("full", "none")
        if not set(data.activities) <= set(self.classes) or (
                not global_head and len(self.classes) != len(data.activities)):
            raise ValueError(f"model over {len(self.classes)} classes cannot score user with "
                             f"activities {data.activities}")
        if data.n_test == 0:
            return float("nan")
        truth = np.asarray(data.activities, dtype=object)[data.y_test]
        return float(np.mean(self.predict(data.x_test) == truth))


def _fresh_head(hyper: EmbeddingHyper, n_classes: int, rng: np.random.Generator) -> nn.ParamSet:
    return build_head(hyper.embed_dim, n_classes, rng).params


def _pairwise_stage(user: ClientTensors, theta: nn.ParamSet, hyper: EmbeddingHyper, cfg: FinetuneConfig,
                    rng: np.random.Generator) -> nn.ParamSet:
    if user.n_train < 2:
        log.warning("user %s: fewer than two samples, pairwise stage skipped", user.user_id)
        return theta
    theta, _ = pairwise_epochs(EmbeddingGraph(hyper), theta, nn.AdamState(lr=cfg.lr), user.x_train,
                               user.y_train, cfg.epochs, cfg.batch, rng, cfg.slope)
    return theta


def _joint_ce_stage(user: ClientTensors, theta: nn.ParamSet, head: nn.ParamSet, hyper: EmbeddingHyper,
                    cfg: FinetuneConfig, rng: np.random.Generator, labels: Optional[np.ndarray] = None,
                    ) -> Tuple[nn.ParamSet, nn.ParamSet]:
    n_classes = head[f"{HEAD_PREFIX}fc.W"].shape[1]
    graph = ClassifierGraph(EmbeddingGraph(hyper), n_classes)
    full, _ = ce_epochs(graph, theta.merged(head), nn.AdamState(lr=cfg.lr), user.x_train,
                        user.y_train if labels is None else labels, cfg.epochs, cfg.batch, rng)
    return full.select(EMBED_PREFIX), full.select(HEAD_PREFIX)


def two_stage(user: ClientTensors, theta_c: nn.ParamSet, hyper: EmbeddingHyper, cfg: FinetuneConfig,
              rng: Optional[np.random.Generator] = None, head: Optional[nn.ParamSet] = None) -> PersonalModel:
    """Pairwise fine-tune of the embedding, then joint cross-entropy fine-tune with a fresh head."""
    rng = rng or derive_rng("personalize", user.user_id)
    head = head if head is not None else _fresh_head(hyper, len(user.activities), rng)
    theta = _pairwise_stage(user, theta_c.copy(), hyper, cfg, rng)
    theta, head = _joint_ce_stage(user, theta, head, hyper, cfg, rng)
    return PersonalModel(theta, head, hyper, user.activities, "two_stage", cfg.epochs)


def merged(user: ClientTensors, theta_c: nn.ParamSet, hyper: EmbeddingHyper, cfg: FinetuneConfig,
           rng: Optional[np.random.Generator] = None, head: Optional[nn.ParamSet] = None) -> PersonalModel:
    """Single joint cross-entropy fine-tune of embedding and a fresh head."""
    rng = rng or derive_rng("personalize", user.user_id)
    head = head if head is not None else _fresh_head(hyper, len(user.activities), rng)
    theta, head = _joint_ce_stage(user, theta_c.copy(), head, hyper, cfg, rng)
    return PersonalModel(theta, head, hyper, user.activities, "merged", cfg.epochs)


def separated(user: ClientTensors, theta_c: nn.ParamSet, hyper: EmbeddingHyper, cfg: FinetuneConfig,
              rng: Optional[np.random.Generator] = None, head: Optional[nn.ParamSet] = None) -> PersonalModel:
    """Pairwise fine-tune of the embedding, then head-only training on the frozen embedding."""
    rng = rng or derive_rng("personalize", user.user_id)
    head = head if head is not None else _fresh_head(hyper, len(user.activities), rng)
    theta = _pairwise_stage(user, theta_c.copy(), hyper, cfg, rng)
    emb = embed_all(EmbeddingGraph(hyper), theta, user.x_train)
    head, _ = head_epochs(head, nn.AdamState(lr=cfg.lr), emb, user.y_train, cfg.epochs, cfg.batch, rng)
    return PersonalModel(theta, head, hyper, user.activities, "separated", cfg.epochs)


def finetune_full(user: ClientTensors, params: nn.ParamSet, hyper: EmbeddingHyper, vocabulary: Sequence[str],
                  cfg: FinetuneConfig, rng: Optional[np.random.Generator] = None) -> PersonalModel:
    """Cross-entropy fine-tune of a whole global classifier over the shared vocabulary (FedReptile)."""
    rng = rng or derive_rng("personalize", user.user_id)
    theta, head = params.select(EMBED_PREFIX), params.select(HEAD_PREFIX)
    if cfg.epochs > 0:
        theta, head = _joint_ce_stage(user, theta, head, hyper, cfg, rng, labels=user.g_train)
    return PersonalModel(theta, head, hyper, tuple(vocabulary), "full", cfg.epochs)


def global_model(params: nn.ParamSet, hyper: EmbeddingHyper, vocabulary: Sequence[str]) -> PersonalModel:
    """Wrap an unadapted global classifier so it can be scored like a personal model."""
    return PersonalModel(params.select(EMBED_PREFIX), params.select(HEAD_PREFIX), hyper, tuple(vocabulary),
                         "none", 0)


def personalize(strategy: str, user: ClientTensors, theta_c: nn.ParamSet, hyper: EmbeddingHyper,
                cfg: FinetuneConfig, rng: Optional[np.random.Generator] = None,
                head: Optional[nn.ParamSet] = None) -> PersonalModel:
    fns = {"two_stage": two_stage, "merged": merged, "separated": separated}
    if strategy not in fns:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {sorted(fns)}")
    return fns[strategy](user, theta_c, hyper, cfg, rng, head)
