import logging
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st

from metahar import nn
from metahar.data import random_user_specs, synth_generate, vocabulary_of
from metahar.federation import (ClientState, LocalConfig, Scheme, ServerState, aggregate, default_subset_size,
                                init_global_params, local_update, run_rounds, select_clients)
from metahar.model import EMBED_PREFIX, HEAD_PREFIX, EmbeddingHyper
from metahar.training import ClientTensors, pairwise_epochs, prepare_client
from metahar.model import EmbeddingGraph

HYPER = EmbeddingHyper(filters=3, embed_dim=6)


@pytest.fixture(scope="module")
def clients_data():
    specs = random_user_specs(4, np.random.default_rng(0))
    users = synth_generate(specs, 6, np.random.default_rng(1), n_classes=3)
    vocab = vocabulary_of(users)
    return [prepare_client(u, vocab) for u in users], vocab


def scalar(v):
    return nn.ParamSet({"w": np.array([float(v)])})


# aggregation ----------------------------------------------------------------

@pytest.mark.parametrize("lam,expected", [(1.0, 3.0), (0.5, 1.5), (0.0, 0.0)])
def test_aggregate_scalar_cases(lam, expected):
    assert aggregate([scalar(2), scalar(4)], scalar(0), lam)["w"][0] == expected


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=8), st.randoms(use_true_random=False))
def test_aggregate_permutation_invariant(values, shuffler):
    ups = [scalar(v) for v in values]
    perm = ups[:]
    shuffler.shuffle(perm)
    for lam in (1.0, 0.5):
        assert aggregate(ups, scalar(0.3), lam).equal(aggregate(perm, scalar(0.3), lam))


def test_aggregate_lambda1_equals_mean(rng):
    ups = [nn.ParamSet({"a": rng.normal(size=(3, 3)), "b": rng.normal(size=2)}) for _ in range(5)]
    central = ups[0].map(lambda v: v * 7)
    assert aggregate(ups, central, 1.0).equal(nn.params_mean(ups))


def test_aggregate_incongruent():
    with pytest.raises(nn.IncongruentParamsError):
        aggregate([scalar(1), nn.ParamSet({"v": np.zeros(1)})], scalar(0))
    with pytest.raises(ValueError):
        aggregate([], scalar(0))


def test_server_lambda_range():
    with pytest.raises(ValueError):
        ServerState(scalar(0), 1.5)


# client selection -----------------------------------------------------------

def test_select_all_and_single():
    r = np.random.default_rng(0)
    assert select_clients(5, 5, r) == [0, 1, 2, 3, 4]
    assert len(select_clients(5, 1, r)) == 1
    with pytest.raises(ValueError):
        select_clients(3, 4, r)


def test_select_frequency():
    r = np.random.default_rng(0)
    c = Counter(i for _ in range(10_000) for i in select_clients(8, 2, r))
    for i in range(8):
        assert c[i] / 10_000 == pytest.approx(0.25, abs=0.02)


def test_select_deterministic():
    assert select_clients(10, 3, np.random.default_rng(5)) == select_clients(10, 3, np.random.default_rng(5))


def test_default_subset_size():
    assert [default_subset_size(n) for n in (1, 2, 3, 8, 9, 23)] == [1, 2, 2, 3, 3, 8]


# local update ---------------------------------------------------------------

@pytest.mark.parametrize("scheme", [Scheme.META_HAR, Scheme.META_HAR_CE, Scheme.FEDAVG])
def test_lr_zero_pushes_snapshot(clients_data, scheme):
    data, vocab = clients_data
    snap = init_global_params(HYPER, scheme, len(vocab), np.random.default_rng(0))
    res = local_update(ClientState(data[0], 0), snap, scheme, HYPER, LocalConfig(lr=0.0, batch=8),
                       np.random.default_rng(1))
    expected = snap.select(EMBED_PREFIX) if scheme is Scheme.META_HAR_CE else snap
    assert res.params.equal(expected)


def test_snapshot_not_modified(clients_data):
    data, vocab = clients_data
    snap = init_global_params(HYPER, Scheme.META_HAR, len(vocab), np.random.default_rng(0))
    before = snap.copy()
    res = local_update(ClientState(data[0], 0), snap, Scheme.META_HAR, HYPER, LocalConfig(batch=8),
                       np.random.default_rng(1))
    assert snap.equal(before)
    assert not res.params.equal(before)


def test_more_epochs_more_progress(clients_data):
    data, vocab = clients_data
    snap = init_global_params(HYPER, Scheme.META_HAR, len(vocab), np.random.default_rng(0))
    one = local_update(ClientState(data[0], 0), snap, Scheme.META_HAR, HYPER, LocalConfig(epochs=1, batch=8),
                       np.random.default_rng(1))
    two = local_update(ClientState(data[0], 0), snap, Scheme.META_HAR, HYPER, LocalConfig(epochs=2, batch=8),
                       np.random.default_rng(1))
    assert not one.params.equal(two.params)


def test_meta_har_never_pushes_head(clients_data):
    data, vocab = clients_data
    for scheme in (Scheme.META_HAR, Scheme.META_HAR_CE):
        snap = init_global_params(HYPER, scheme, len(vocab), np.random.default_rng(0))
        assert not any(k.startswith(HEAD_PREFIX) for k in snap)
        state = ClientState(data[1], 1)
        res = local_update(state, snap, scheme, HYPER, LocalConfig(batch=8), np.random.default_rng(0))
        assert all(k.startswith(EMBED_PREFIX) for k in res.params)
    assert state.head is not None and state.head[f"{HEAD_PREFIX}fc.W"].shape == (6, len(data[1].activities))


def test_fedavg_pushes_full_classifier(clients_data):
    data, vocab = clients_data
    snap = init_global_params(HYPER, Scheme.FEDAVG, len(vocab), np.random.default_rng(0))
    res = local_update(ClientState(data[0], 0), snap, Scheme.FEDAVG, HYPER, LocalConfig(batch=8),
                       np.random.default_rng(0))
    assert any(k.startswith(HEAD_PREFIX) for k in res.params)


def test_single_class_pairwise_loss_decreases():
    specs = random_user_specs(1, np.random.default_rng(0))
    user = synth_generate(specs, 30, np.random.default_rng(1), n_classes=1)[0]
    data = prepare_client(user, user.activities)
    graph = EmbeddingGraph(HYPER)
    params = graph.init(np.random.default_rng(0))
    _, losses = pairwise_epochs(graph, params, nn.AdamState(lr=3e-3), data.x_train, data.y_train, 8, 16,
                                np.random.default_rng(0))
    assert np.mean(losses[-3:]) < np.mean(losses[:3])


def test_optimizer_state_persists_unless_reset(clients_data):
    data, vocab = clients_data
    snap = init_global_params(HYPER, Scheme.META_HAR, len(vocab), np.random.default_rng(0))
    state = ClientState(data[0], 0)
    local_update(state, snap, Scheme.META_HAR, HYPER, LocalConfig(batch=8), np.random.default_rng(0))
    t1 = state.opt.t
    local_update(state, snap, Scheme.META_HAR, HYPER, LocalConfig(batch=8), np.random.default_rng(0))
    assert state.opt.t == 2 * t1
    local_update(state, snap, Scheme.META_HAR, HYPER, LocalConfig(batch=8, reset_optimizer=True),
                 np.random.default_rng(0))
    assert state.opt.t == t1


def test_client_with_one_sample_errors(clients_data):
    data, vocab = clients_data
    d = data[0]
    tiny = ClientTensors(d.user_id, d.activities, [x[:1] for x in d.x_train], d.y_train[:1], d.g_train[:1],
                         d.x_test, d.y_test, d.g_test)
    snap = init_global_params(HYPER, Scheme.META_HAR, len(vocab), np.random.default_rng(0))
    with pytest.raises(ValueError):
        local_update(ClientState(tiny, 0), snap, Scheme.META_HAR, HYPER, LocalConfig(), np.random.default_rng(0))


# rounds ---------------------------------------------------------------------

def _server(scheme, vocab, seed=0, lam=1.0):
    return ServerState(init_global_params(HYPER, scheme, len(vocab), np.random.default_rng(seed)), lam, seed=seed)


def test_zero_rounds_unchanged(clients_data):
    data, vocab = clients_data
    server = _server(Scheme.META_HAR, vocab)
    before = server.params.copy()
    server, hist = run_rounds(server, [ClientState(d, i) for i, d in enumerate(data)], Scheme.META_HAR, HYPER, 0)
    assert server.params.equal(before) and hist == []


def test_rounds_deterministic_and_worker_independent(clients_data):
    data, vocab = clients_data
    runs = []
    for workers in (1, 1, 3):
        server = _server(Scheme.META_HAR, vocab)
        server, hist = run_rounds(server, [ClientState(d, i) for i, d in enumerate(data)], Scheme.META_HAR, HYPER,
                                  2, 2, LocalConfig(batch=8), workers=workers)
        runs.append((server.params, [h.as_dict() for h in hist]))
    for params, hist in runs[1:]:
        assert params.equal(runs[0][0]) and hist == runs[0][1]
    assert len(runs[0][1]) == 2 and runs[0][1][0]["scheme"] == "meta_har"


def test_identical_clients_average_equals_single_update(clients_data):
    data, vocab = clients_data
    server = _server(Scheme.FEDAVG, vocab)
    snap = server.params.copy()
    # same data, same user id -> same derived seed for every client
    clients = [ClientState(data[0], i) for i in range(3)]
    server, _ = run_rounds(server, clients, Scheme.FEDAVG, HYPER, 1, 3, LocalConfig(batch=8))
    from metahar.training import derive_rng
    single = local_update(ClientState(data[0], 0), snap, Scheme.FEDAVG, HYPER, LocalConfig(batch=8),
                          derive_rng(0, 1, data[0].user_id))
    assert server.params.equal(single.params)


def test_one_round_equals_mean_of_local_updates(clients_data):
    """fedavg and fedreptile (lam=1) share local procedure; one round is the plain parameter mean."""
    from metahar.training import derive_rng
    data, vocab = clients_data
    for scheme in (Scheme.FEDAVG, Scheme.FEDREPTILE):
        server = _server(scheme, vocab, lam=1.0)
        snap = server.params.copy()
        server, _ = run_rounds(server, [ClientState(d, i) for i, d in enumerate(data)], scheme, HYPER, 1,
                               len(data), LocalConfig(batch=8))
        ups = [local_update(ClientState(d, i), snap, scheme, HYPER, LocalConfig(batch=8),
                            derive_rng(0, 1, d.user_id)).params for i, d in enumerate(data)]
        assert server.params.equal(nn.params_mean(ups))
    # and the two schemes produce the same parameters
    a = run_rounds(_server(Scheme.FEDAVG, vocab), [ClientState(d, i) for i, d in enumerate(data)],
                   Scheme.FEDAVG, HYPER, 2, 2, LocalConfig(batch=8))[0].params
    b = run_rounds(_server(Scheme.FEDREPTILE, vocab), [ClientState(d, i) for i, d in enumerate(data)],
                   Scheme.FEDREPTILE, HYPER, 2, 2, LocalConfig(batch=8))[0].params
    assert a.equal(b)


def test_failing_client_skipped(clients_data, caplog):
    data, vocab = clients_data
    d = data[0]
    broken = ClientTensors(d.user_id + "_x", d.activities, [x[:1] for x in d.x_train], d.y_train[:1],
                           d.g_train[:1], d.x_test, d.y_test, d.g_test)
    clients = [ClientState(broken, 0), ClientState(data[1], 1)]
    with caplog.at_level(logging.WARNING):
        server, hist = run_rounds(_server(Scheme.META_HAR, vocab), clients, Scheme.META_HAR, HYPER, 1, 2,
                                  LocalConfig(batch=8))
    assert hist[0].clients == [data[1].user_id]
    assert "skipped" in caplog.text


def test_eval_patience_and_checkpoints(clients_data):
    data, vocab = clients_data
    calls, saved = [], []
    server, hist = run_rounds(_server(Scheme.META_HAR, vocab), [ClientState(d, i) for i, d in enumerate(data)],
                              Scheme.META_HAR, HYPER, 10, 2, LocalConfig(batch=8),
                              evaluate=lambda p: calls.append(1) or {"meta_train": 0.5}, patience=3,
                              on_round=lambda rec: None, checkpoint=lambda r, p: saved.append(r),
                              checkpoint_every=2)
    assert len(hist) == 4          # best at round 1, three stale rounds
    assert saved == [2, 4]
    assert hist[0].eval == {"meta_train": 0.5}


def test_broadcast_isolation(clients_data):
    data, vocab = clients_data
    server = _server(Scheme.META_HAR, vocab)
    states = [ClientState(d, i) for i, d in enumerate(data)]
    seen = []

    def on_round(rec):
        seen.append(server.params.copy())

    server, _ = run_rounds(server, states, Scheme.META_HAR, HYPER, 2, 2, LocalConfig(batch=8), on_round=on_round)
    # mutating a client's optimizer or data afterwards cannot touch the central parameters
    before = server.params.copy()
    for s in states:
        if s.opt is not None and s.opt.m is not None:
            for v in s.opt.m.values():
                v += 1.0
    assert server.params.equal(before)
