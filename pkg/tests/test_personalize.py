import numpy as np
import pytest

from metahar import nn
from metahar.data import random_user_specs, synth_generate, vocabulary_of
from metahar.federation import Scheme
from metahar.harness.config import ExperimentConfig
from metahar.harness.experiment import federate, prepare_seed
from metahar.model import EMBED_PREFIX, HEAD_PREFIX, EmbeddingGraph, EmbeddingHyper, build_head
from metahar.personalize import (FinetuneConfig, PersonalModel, finetune_full, global_model, merged,
                                 personalize, separated, two_stage)
from metahar.training import embed_all, head_epochs, prepare_client

HYPER = EmbeddingHyper(filters=4, embed_dim=8)


@pytest.fixture(scope="module")
def user():
    specs = random_user_specs(1, np.random.default_rng(3))
    u = synth_generate(specs, 20, np.random.default_rng(4), n_classes=4)[0]
    return prepare_client(u, vocabulary_of([u]))


@pytest.fixture(scope="module")
def theta():
    return EmbeddingGraph(HYPER).init(np.random.default_rng(0))


@pytest.fixture(scope="module")
def meta_trained():
    cfg = ExperimentConfig(schemes=["meta_har"], seeds=[0], rounds=12, lr=3e-3, batch=16, filters=8,
                           embed_dim=16, n_meta_test=2, patience=None, eval_every=0)
    ctx = prepare_seed(cfg, 0)
    params, _, _ = federate(cfg, ctx, Scheme.META_HAR)
    return ctx, params.select(EMBED_PREFIX)


@pytest.mark.parametrize("fn", [two_stage, merged, separated])
def test_lr_zero_keeps_theta(user, theta, fn):
    head = build_head(HYPER.embed_dim, len(user.activities), np.random.default_rng(9)).params
    pm = fn(user, theta, HYPER, FinetuneConfig(epochs=2, batch=16, lr=0.0), np.random.default_rng(0), head.copy())
    assert pm.theta.equal(theta)
    assert pm.head.equal(head)


def test_zero_epochs_is_identity(user, theta):
    pm = two_stage(user, theta, HYPER, FinetuneConfig(epochs=0))
    assert pm.theta.equal(theta)


def test_head_shape_full_size(user):
    hyper = EmbeddingHyper(filters=4, embed_dim=100)
    th = EmbeddingGraph(hyper).init(np.random.default_rng(0))
    pm = two_stage(user, th, hyper, FinetuneConfig(epochs=1, batch=32))
    assert pm.head[f"{HEAD_PREFIX}fc.W"].shape == (100, 4)
    assert pm.n_classes == 4 and pm.classes == user.activities


def test_theta_congruent_and_input_untouched(user, theta):
    before = theta.copy()
    for s in ("two_stage", "merged", "separated"):
        pm = personalize(s, user, theta, HYPER, FinetuneConfig(epochs=1, batch=16))
        assert pm.theta.is_congruent(theta)
        assert pm.strategy == s and pm.epochs == 1
    assert theta.equal(before)


def test_merged_equals_two_stage_without_stage_one(user, theta):
    # one training sample: the pairwise stage is skipped and two_stage reduces to merged
    x = [a[:1] for a in user.x_train]
    one = type(user)(user.user_id, user.activities, x, user.y_train[:1], user.g_train[:1],
                     user.x_test, user.y_test, user.g_test)
    cfg = FinetuneConfig(epochs=2, batch=4)
    a = two_stage(one, theta, HYPER, cfg, np.random.default_rng(5))
    b = merged(one, theta, HYPER, cfg, np.random.default_rng(5))
    assert a.theta.equal(b.theta) and a.head.equal(b.head)


def test_separated_freezes_theta_in_head_phase(user, theta):
    cfg = FinetuneConfig(epochs=2, batch=16)
    sep = separated(user, theta, HYPER, cfg, np.random.default_rng(5))
    # the embedding after separated equals the embedding after the pairwise phase alone
    from metahar.personalize import _pairwise_stage
    rng = np.random.default_rng(5)
    build_head(HYPER.embed_dim, len(user.activities), rng)
    assert sep.theta.equal(_pairwise_stage(user, theta.copy(), HYPER, cfg, rng))


def test_head_only_on_separable_embeddings():
    rng = np.random.default_rng(0)
    centers = rng.normal(size=(4, 8)) * 3
    y = rng.integers(0, 4, 400)
    emb = centers[y] + 0.3 * rng.normal(size=(400, 8))
    head = build_head(8, 4, rng).params
    head, losses = head_epochs(head, nn.AdamState(lr=1e-2), emb, y, 20, 32, rng)
    pred = np.argmax(emb @ head["head.fc.W"] + head["head.fc.b"], axis=1)
    assert np.mean(pred == y) > 0.95
    assert losses[-1] < losses[0]


def test_dimension_mismatch_rejected(user, theta):
    bad = build_head(HYPER.embed_dim + 1, len(user.activities), np.random.default_rng(0)).params
    with pytest.raises(Exception):
        merged(user, theta, HYPER, FinetuneConfig(epochs=1), None, bad)
    pm = merged(user, theta, HYPER, FinetuneConfig(epochs=0))
    wrong = PersonalModel(pm.theta, pm.head, HYPER, pm.classes[:3], "merged", 0)
    with pytest.raises(ValueError):
        wrong.evaluate(user)


def test_unknown_strategy(user, theta):
    with pytest.raises(ValueError):
        personalize("nope", user, theta, HYPER, FinetuneConfig())


def test_global_model_and_full_finetune(user):
    vocab = user.activities
    from metahar.federation import init_global_params
    params = init_global_params(HYPER, Scheme.FEDAVG, len(vocab), np.random.default_rng(0))
    g = global_model(params, HYPER, vocab)
    assert 0.0 <= g.evaluate(user) <= 1.0
    ft = finetune_full(user, params, HYPER, vocab, FinetuneConfig(epochs=0))
    assert ft.theta.merged(ft.head).equal(params)
    ft3 = finetune_full(user, params, HYPER, vocab, FinetuneConfig(epochs=3, batch=16, lr=3e-3))
    assert ft3.evaluate(user) > g.evaluate(user)


def test_two_stage_beats_frozen_head_only(meta_trained):
    ctx, theta_c = meta_trained
    graph = EmbeddingGraph(ctx.hyper)
    cfg = FinetuneConfig(epochs=3, batch=16, lr=3e-3)
    gains = []
    for u in ctx.split.meta_test:
        d = ctx.data[u.user_id]
        rng = np.random.default_rng(0)
        head = build_head(ctx.hyper.embed_dim, len(d.activities), rng).params
        head, _ = head_epochs(head, nn.AdamState(lr=cfg.lr), embed_all(graph, theta_c, d.x_train), d.y_train,
                              cfg.epochs, cfg.batch, rng)
        frozen = PersonalModel(theta_c, head, ctx.hyper, d.activities, "head_only", 3).evaluate(d)
        gains.append((two_stage(d, theta_c, ctx.hyper, cfg).evaluate(d) - frozen, d.n_test))
    gain = sum(g * n for g, n in gains) / sum(n for _, n in gains)
    assert gain >= 0.05


def test_more_epochs_improve_train_fit(meta_trained):
    ctx, theta_c = meta_trained
    accs = {}
    for ep in (1, 3):
        per = []
        for u in ctx.split.meta_test:
            d = ctx.data[u.user_id]
            pm = two_stage(d, theta_c, ctx.hyper, FinetuneConfig(epochs=ep, batch=16, lr=3e-3))
            per.append(np.mean(pm.predict_indices(d.x_train) == d.y_train))
        accs[ep] = np.mean(per)
    assert accs[3] >= accs[1]
