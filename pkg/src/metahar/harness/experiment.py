"""End-to-end protocol: split users, federate, personalize, score with the weighted accuracy."""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .. import nn
from ..data import (ClientDataset, FederationSplit, balance_test, default_profiles, load_dataset, make_clients,
                    merge_datasets, non_iid_partition, random_user_specs, split_meta, synth_generate,
                    vocabulary_of)
from ..federation import (ClientState, LocalConfig, RoundRecord, Scheme, ServerState, init_global_params,
                          run_rounds, train_central)
from ..model import EMBED_PREFIX, EmbeddingGraph, EmbeddingHyper
from ..personalize import (FinetuneConfig, PersonalModel, finetune_full, global_model, merged,
                           personalize)
from ..training import ClientTensors, derive_rng, embed_all, prepare_client
from .config import ExperimentConfig

log = logging.getLogger(__name__)

SPLITS = ("meta_train", "meta_test")


class ExperimentError(RuntimeError):
    def __init__(self, message: str, partial: Optional["ExperimentReport"] = None):
        super().__init__(message)
        self.partial = partial


def variant_name(scheme: str, strategy: Optional[str] = None, epochs: Optional[int] = None) -> str:
    """Report key: ``meta_har(3)`` for the default two-stage strategy, ``meta_har_merged(3)`` etc. otherwise."""
    if epochs is None:
        return scheme
    if strategy in (None, "two_stage") or scheme != "meta_har":
        return f"{scheme}({epochs})"
    return f"{scheme}_{strategy}({epochs})"


def weighted_accuracy(per_user: Sequence[Tuple[float, int]]) -> float:
    """Test-count weighted mean of per-user accuracies.

    ``m * a`` is snapped to the nearest integer when it is one up to rounding, so
    accuracies that are ratios of counts give a result independent of how users
    are grouped.
    """
    items = list(per_user)
    if not items:
        raise ValueError("weighted accuracy of an empty user list")
    total = 0
    acc = 0.0
    for a, m in items:
        if m < 1 or not 0.0 <= a <= 1.0:
            raise ValueError(f"invalid (accuracy, count) pair ({a}, {m})")
        correct = m * a
        if abs(correct - round(correct)) < 1e-6:
            correct = round(correct)
        acc += correct
        total += m
    return acc / total


# --------------------------------------------------------------------- data

def load_users(cfg: ExperimentConfig, seed: int) -> Tuple[List[ClientDataset], Optional[Tuple[str, ...]]]:
    """All users with local 80/20 splits, before Non-IID removal."""
    rng = derive_rng(seed, "data")
    if cfg.format == "synthetic":
        specs = random_user_specs(cfg.synth_users, derive_rng(seed, "styles"), cfg.synth_heterogeneity,
                                  cfg.synth_noise, cadence_spread=cfg.synth_cadence_spread,
                                  tone_amp=cfg.synth_tone_amp)
        profiles = default_profiles(cfg.synth_classes + (cfg.synth_merge_shift if cfg.synth_merge_users else 0))
        users = synth_generate(specs, cfg.synth_per_class, rng, profiles[:cfg.synth_classes],
                               train_frac=cfg.train_frac)
        if cfg.synth_merge_users:
            # a second device population with its own style and an overlapping activity set
            other = random_user_specs(cfg.synth_merge_users, derive_rng(seed, "styles", "merge"),
                                      cfg.synth_heterogeneity, cfg.synth_merge_noise, prefix="v",
                                      cadence_spread=cfg.synth_cadence_spread, tone_amp=cfg.synth_tone_amp)
            users = merge_datasets(users, synth_generate(other, cfg.synth_per_class, rng,
                                                         profiles[cfg.synth_merge_shift:],
                                                         train_frac=cfg.train_frac))
    else:
        users = make_clients(load_dataset(cfg.dataset, cfg.format), rng, cfg.train_frac)
    if cfg.merge_path:
        other = make_clients(load_dataset(cfg.merge_path, cfg.merge_format or "canonical"), rng, cfg.train_frac)
        users = merge_datasets(users, other, cfg.merge_overlap)
    vocab = tuple(cfg.vocabulary) if cfg.vocabulary else None
    return users, vocab


def build_split(cfg: ExperimentConfig, seed: int) -> FederationSplit:
    users, vocab = load_users(cfg, seed)
    vocab = vocab or vocabulary_of(users)
    if cfg.non_iid:
        users = non_iid_partition(users, derive_rng(seed, "non_iid"), cfg.max_remove)
    if cfg.balanced_test:
        users = [balance_test(u, derive_rng(seed, "balance", u.user_id)) for u in users]
    return split_meta(users, cfg.n_meta_test, derive_rng(seed, "split"), vocab)


# ----------------------------------------------------------------- records

@dataclass
class ExperimentReport:
    config: Dict[str, Any]
    seeds: List[int] = field(default_factory=list)
    results: Dict[str, List[Dict[str, Any]]] = field(default_factory=dict)   # variant -> per-seed
    users: List[Dict[str, Any]] = field(default_factory=list)
    rounds: List[Dict[str, Any]] = field(default_factory=list)

    def add(self, variant: str, seed: int, scores: Mapping[str, float]) -> None:
        self.results.setdefault(variant, []).append({"seed": seed, **scores})

    def summary(self) -> Dict[str, Dict[str, Dict[str, float]]]:
        out = {}
        for variant, rows in self.results.items():
            out[variant] = {}
            for split in SPLITS:
                vals = [r[split] for r in rows if r.get(split) is not None and not math.isnan(r[split])]
                if vals:
                    out[variant][split] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)),
                                           "min": float(np.min(vals)), "max": float(np.max(vals)),
                                           "n": len(vals)}
        return out

    def score(self, variant: str, split: str = "meta_test", seed: Optional[int] = None) -> float:
        rows = self.results[variant]
        if seed is None:
            return self.summary()[variant][split]["mean"]
        return next(r[split] for r in rows if r["seed"] == seed)

    def as_dict(self) -> Dict[str, Any]:
        return {"config": self.config, "seeds": self.seeds, "results": self.results,
                "summary": self.summary(), "users": self.users, "rounds": self.rounds}

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True, default=_json_default)


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(type(obj))


def _score_models(models: Mapping[str, PersonalModel], data: Mapping[str, ClientTensors],
                  split_of: Mapping[str, str], variant: str, seed: int,
                  report: ExperimentReport) -> Dict[str, Optional[float]]:
    per_split: Dict[str, List[Tuple[float, int]]] = {s: [] for s in SPLITS}
    for uid, model in models.items():
        d = data[uid]
        if d.n_test == 0:
            continue
        acc = model.evaluate(d)
        per_split[split_of[uid]].append((acc, d.n_test))
        report.users.append({"seed": seed, "variant": variant, "user": uid, "split": split_of[uid],
                             "strategy": model.strategy, "epochs": model.epochs,
                             "n_test": d.n_test, "accuracy": acc})
    return {s: (weighted_accuracy(v) if v else None) for s, v in per_split.items()}


def centroid_accuracy(hyper: EmbeddingHyper, theta: nn.ParamSet, data: Sequence[ClientTensors]) -> float:
    """Cheap per-round probe for embedding schemes: nearest class centroid by cosine,
    centroids from each user's train split, scored on its test split."""
    graph = EmbeddingGraph(hyper)
    pairs = []
    for d in data:
        if d.n_test == 0:
            continue
        etr = embed_all(graph, theta, d.x_train)
        ete = embed_all(graph, theta, d.x_test)
        cents = np.stack([etr[d.y_train == c].mean(axis=0) if np.any(d.y_train == c) else np.zeros(etr.shape[1])
                          for c in range(len(d.activities))])
        cents /= np.maximum(np.linalg.norm(cents, axis=1, keepdims=True), 1e-12)
        ete = ete / np.maximum(np.linalg.norm(ete, axis=1, keepdims=True), 1e-12)
        pred = np.argmax(ete @ cents.T, axis=1)
        pairs.append((float(np.mean(pred == d.y_test)), d.n_test))
    return weighted_accuracy(pairs) if pairs else float("nan")


# ------------------------------------------------------------------- runner

@dataclass
class SeedContext:
    seed: int
    split: FederationSplit
    hyper: EmbeddingHyper
    data: Dict[str, ClientTensors]
    split_of: Dict[str, str]

    @property
    def meta_train(self) -> List[ClientTensors]:
        return [self.data[u.user_id] for u in self.split.meta_train]

    @property
    def all_users(self) -> List[ClientTensors]:
        return [self.data[u.user_id] for u in self.split.meta_train + self.split.meta_test]


def prepare_seed(cfg: ExperimentConfig, seed: int, split: Optional[FederationSplit] = None) -> SeedContext:
    split = split or build_split(cfg, seed)
    users = split.meta_train + split.meta_test
    if not split.meta_train:
        raise ValueError("no meta-train users")
    data = {u.user_id: prepare_client(u, split.vocabulary, cfg.k) for u in users}
    axes = tuple(x.shape[2] // 2 - 1 for x in data[users[0].user_id].x_train)
    split_of = {u.user_id: "meta_train" for u in split.meta_train}
    split_of.update({u.user_id: "meta_test" for u in split.meta_test})
    return SeedContext(seed, split, cfg.hyper(axes), data, split_of)


def _local(cfg: ExperimentConfig) -> LocalConfig:
    return LocalConfig(cfg.local_epochs, cfg.batch, cfg.lr, cfg.slope, cfg.reset_optimizer)


def _finetune(cfg: ExperimentConfig, epochs: int) -> FinetuneConfig:
    return FinetuneConfig(epochs, cfg.finetune_batch or cfg.batch, cfg.finetune_lr or cfg.lr, cfg.slope)


def federate(cfg: ExperimentConfig, ctx: SeedContext, scheme: Scheme,
             report: Optional[ExperimentReport] = None, on_round=None, checkpoint=None,
             ) -> Tuple[nn.ParamSet, List[ClientState], List[RoundRecord]]:
    """Meta-train the central parameters for ``scheme`` on the meta-train users."""
    n_cls = len(ctx.split.vocabulary)
    params = init_global_params(ctx.hyper, scheme, n_cls, derive_rng(ctx.seed, "init"))
    if scheme is Scheme.CENTRAL:
        evaluate = (lambda p: {"meta_train": _global_acc(cfg, ctx, p, ctx.meta_train)})
        params, hist = train_central(params, ctx.hyper, ctx.meta_train, cfg.central_epochs, cfg.batch, cfg.lr,
                                     derive_rng(ctx.seed, "central"), evaluate)
        clients: List[ClientState] = []
    else:
        clients = [ClientState(d, i) for i, d in enumerate(ctx.meta_train)]
        if scheme.federates_head:
            evaluate = (lambda p: {"meta_train": _global_acc(cfg, ctx, p, ctx.meta_train)})
        else:
            evaluate = (lambda p: {"meta_train": centroid_accuracy(ctx.hyper, p, ctx.meta_train)})
        server = ServerState(params, cfg.lam, seed=ctx.seed)
        size = min(cfg.subset_size, len(clients)) if cfg.subset_size else None
        server, hist = run_rounds(server, clients, scheme, ctx.hyper, cfg.rounds, size, _local(cfg),
                                  evaluate=evaluate if cfg.eval_every else None,
                                  eval_every=cfg.eval_every or 1, patience=cfg.patience,
                                  weighted=cfg.weighted_fedavg and scheme is Scheme.FEDAVG,
                                  workers=cfg.workers, on_round=on_round,
                                  checkpoint=checkpoint, checkpoint_every=cfg.checkpoint_every)
        params = server.params
    if report is not None:
        report.rounds.extend({"seed": ctx.seed, **h.as_dict(), "scheme": scheme.value} for h in hist)
    return params, clients, hist


def _global_acc(cfg: ExperimentConfig, ctx: SeedContext, params: nn.ParamSet,
                users: Sequence[ClientTensors]) -> float:
    model = global_model(params, ctx.hyper, ctx.split.vocabulary)
    pairs = [(model.evaluate(d), d.n_test) for d in users if d.n_test]
    return weighted_accuracy(pairs) if pairs else float("nan")


def run_seed(cfg: ExperimentConfig, seed: int, report: ExperimentReport,
             split: Optional[FederationSplit] = None) -> None:
    ctx = prepare_seed(cfg, seed, split)
    vocab = ctx.split.vocabulary
    schemes = [Scheme(s) for s in cfg.schemes]
    trained: Dict[str, Tuple[nn.ParamSet, List[ClientState]]] = {}

    def trained_for(scheme: Scheme):
        # FedAvg and FedReptile share one federated run: identical local procedure and server rule
        key = "fedavg" if scheme in (Scheme.FEDAVG, Scheme.FEDREPTILE) else scheme.value
        if key not in trained:
            params, clients, _ = federate(cfg, ctx, Scheme.FEDAVG if key == "fedavg" else scheme, report)
            trained[key] = (params, clients)
        return trained[key]

    def score(variant: str, models: Dict[str, PersonalModel]) -> None:
        report.add(variant, seed, _score_models(models, ctx.data, ctx.split_of, variant, seed, report))

    for scheme in schemes:
        params, clients = trained_for(scheme)
        if scheme in (Scheme.CENTRAL, Scheme.FEDAVG):
            model = global_model(params, ctx.hyper, vocab)
            score(scheme.value, {d.user_id: model for d in ctx.all_users})
        elif scheme is Scheme.FEDREPTILE:
            for ep in cfg.finetune_epochs:
                ft = _finetune(cfg, ep)
                score(f"fedreptile({ep})", {
                    d.user_id: finetune_full(d, params, ctx.hyper, vocab, ft, derive_rng(seed, "ft", d.user_id))
                    for d in ctx.all_users})
        elif scheme is Scheme.META_HAR:
            theta = params.select(EMBED_PREFIX)
            for strategy in cfg.finetune_strategies:
                for ep in cfg.finetune_epochs:
                    ft = _finetune(cfg, ep)
                    name = variant_name("meta_har", strategy, ep)
                    score(name, {d.user_id: personalize(strategy, d, theta, ctx.hyper, ft,
                                                        derive_rng(seed, "ft", d.user_id))
                                 for d in ctx.all_users})
        elif scheme is Scheme.META_HAR_CE:
            theta = params.select(EMBED_PREFIX)
            heads = {c.user_id: c.head for c in clients if c.head is not None}
            for ep in cfg.finetune_epochs:
                ft = _finetune(cfg, ep)
                score(f"meta_har_ce({ep})", {
                    d.user_id: merged(d, theta, ctx.hyper, ft, derive_rng(seed, "ft", d.user_id),
                                      heads.get(d.user_id))
                    for d in ctx.all_users})


def _seed_report(cfg: ExperimentConfig, seed: int, split: Optional[FederationSplit]) -> ExperimentReport:
    report = ExperimentReport(config=cfg.as_dict())
    try:
        run_seed(cfg, seed, report, split)
    except Exception as exc:
        raise ExperimentError(f"seed {seed} failed: {exc}", report) from exc
    report.seeds.append(seed)
    return report


def _absorb(into: ExperimentReport, part: ExperimentReport) -> None:
    into.seeds += part.seeds
    for variant, rows in part.results.items():
        into.results.setdefault(variant, []).extend(rows)
    into.users += part.users
    into.rounds += part.rounds


def run_experiment(cfg: ExperimentConfig, splits: Optional[Mapping[int, FederationSplit]] = None,
                   ) -> ExperimentReport:
    """Run every configured scheme for every seed.

    A failing seed raises ``ExperimentError`` carrying everything gathered so far.
    Seeds may run in worker processes (``seed_workers``); the merged report is the
    same as a sequential run because per-seed results are combined in seed order.
    """
    splits = splits or {}
    report = ExperimentReport(config=cfg.as_dict())
    if cfg.seed_workers > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=cfg.seed_workers) as pool:
            futures = [pool.submit(_seed_report, cfg, s, splits.get(s)) for s in cfg.seeds]
            for seed, fut in zip(cfg.seeds, futures):
                try:
                    _absorb(report, fut.result())
                except ExperimentError as exc:
                    if exc.partial is not None:
                        _absorb(report, exc.partial)
                    raise ExperimentError(str(exc), report) from exc
        return report
    for seed in cfg.seeds:
        try:
            part = _seed_report(cfg, seed, splits.get(seed))
        except ExperimentError as exc:
            _absorb(report, exc.partial)
            raise ExperimentError(str(exc), report) from exc.__cause__
        _absorb(report, part)
    return report
