import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedrel import diig
from fedrel import federation as fed
from fedrel import synthdata as sd
from fedrel.metrics import MetricsWriter, read_metrics
from fedrel.numerics import OptState, ParamSet

MODEL = diig.ModelConfig(d=6, node_emb=8, graph_emb=8, readout_hidden=(8, 8), w=2)


@pytest.fixture(scope="module")
def tiny_ds():
    return sd.generate(sd.GeneratorConfig(num_sequences=40), 5)


def tiny_data(ds, K, partition="dirichlet", seed=0):
    return fed.prepare_data(ds, MODEL, K, partition=partition, seed=seed, transform_epochs=2)


def tiny_cfg(**kw):
    base = dict(K=3, rounds=3, vae_epochs=2, seed=0)
    base.update(kw)
    return fed.FedConfig(**base)


def same(a, b):
    return [r.comparable() for r in a] == [r.comparable() for r in b]


# -------------------------------------------------------------- server ops

def test_synthesize_examples():
    v = np.array([0.3, -1.0])
    assert np.array_equal(fed.synthesize_global([v]), v)
    np.testing.assert_array_equal(fed.synthesize_global([np.array([1.0]), np.array([3.0])]), [2.0])
    with pytest.raises(ValueError):
        fed.synthesize_global([])


def test_synthesize_loop_oracle():
    vs = list(np.random.default_rng(0).standard_normal((7, 5)))
    acc = np.zeros(5)
    for v in vs:
        acc = acc + v
    np.testing.assert_allclose(fed.synthesize_global(vs), acc / 7, atol=1e-12)


@pytest.mark.parametrize("K", [1, 2, 3, 5, 7])
def test_relevance_equal_vectors_uniform(K):
    v = np.random.default_rng(K).standard_normal(4)
    r = fed.relevance_scores([v.copy() for _ in range(K)], fed.synthesize_global([v] * K))
    assert np.array_equal(r, np.full(K, 1.0 / K))


def test_relevance_log2_pair():
    d_tilde = np.array([0.5, -0.25, 1.0])
    far = d_tilde + np.array([0.0, math.log(2), 0.0])
    r = fed.relevance_scores([d_tilde.copy(), far], d_tilde)
    np.testing.assert_allclose(r, [1 / 3, 2 / 3], atol=1e-12)


def test_relevance_farther_weighs_more():
    d_tilde = np.zeros(2)
    r = fed.relevance_scores([np.array([0.1, 0]), np.array([0.5, 0]), np.array([0.3, 0])], d_tilde)
    assert r[1] > r[2] > r[0]
    assert r.sum() == pytest.approx(1.0, abs=1e-15)


def test_relevance_dim_mismatch():
    with pytest.raises(ValueError):
        fed.relevance_scores([np.zeros(3)], np.zeros(2))


def _sets(values):
    return [ParamSet({"a": (2,), "b": ()}, np.asarray(v, dtype=float)) for v in values]


def test_aggregate_examples():
    p1, p2 = _sets([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    assert fed.aggregate_weights([p1, p2], [1.0, 0.0]).flat.tobytes() == p1.flat.tobytes()
    s = [ParamSet({"w": ()}, np.array([0.0])), ParamSet({"w": ()}, np.array([2.0]))]
    assert fed.aggregate_weights(s, [0.5, 0.5])["w"] == 1.0


def test_aggregate_uniform_matches_fedavg_formula():
    ps = _sets(np.random.default_rng(0).standard_normal((3, 3)))
    got = fed.aggregate_weights(ps, np.full(3, 1 / 3))
    expected = (1 / 3) * ps[0].flat + (1 / 3) * ps[1].flat + (1 / 3) * ps[2].flat
    assert got.flat.tobytes() == expected.tobytes()


def test_aggregate_name_mismatch_lists_names():
    a = ParamSet({"W_x": (2,), "b": ()})
    b = ParamSet({"W_y": (2,), "b": ()})
    with pytest.raises(ValueError, match="W_x, W_y"):
        fed.aggregate_weights([a, b], [0.5, 0.5])


def test_aggregate_rejects_bad_weights():
    ps = _sets([[1, 2, 3], [4, 5, 6]])
    with pytest.raises(ValueError):
        fed.aggregate_weights(ps, [0.7, 0.7])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_aggregate_convex(K, seed):
    rng = np.random.default_rng(seed)
    vals = rng.standard_normal((K, 3)) * 10
    r = rng.dirichlet(np.ones(K))
    out = fed.aggregate_weights(_sets(vals), r).flat
    tol = 1e-12 * (1 + np.abs(vals).max())
    assert (out >= vals.min(axis=0) - tol).all() and (out <= vals.max(axis=0) + tol).all()


def test_fedatt_fixed_point():
    g = diig.init_params(MODEL, 0)
    new, att = fed.fedatt_aggregate(g, [g.copy(), g.copy(), g.copy()], 1.5e-3)
    assert new.flat.tobytes() == g.flat.tobytes()
    np.testing.assert_allclose(att, 1 / 3, atol=1e-15)


def test_fedatt_step_toward_participants():
    g = ParamSet({"w": (2,)}, np.zeros(2))
    locals_ = [ParamSet({"w": (2,)}, np.array([1.0, 0.0])), ParamSet({"w": (2,)}, np.array([0.0, 3.0]))]
    new, att = fed.fedatt_aggregate(g, locals_, 0.5)
    # norms 1 and 3 -> attention softmax(1, 3)
    a = np.exp([1.0, 3.0]) / np.exp([1.0, 3.0]).sum()
    np.testing.assert_allclose(att, a, atol=1e-15)
    np.testing.assert_allclose(new["w"], 0.5 * (a[0] * np.array([1.0, 0]) + a[1] * np.array([0, 3.0])), atol=1e-15)


# ---------------------------------------------------------- local update

def _participant(data, cfg, with_dist=True):
    theta0 = fed.global_init(data.model, cfg.seed)
    return fed.make_participants(data, cfg, theta0, with_distribution=with_dist)[0], theta0


def test_local_update_zero_epochs(tiny_ds):
    data = tiny_data(tiny_ds, 2)
    cfg = tiny_cfg(K=2)
    p, theta0 = _participant(data, cfg)
    g = theta0.copy()
    g.flat += 0.01
    params, _, _ = fed.local_update(p, g, p.dist.d_hat, 0, data.model, cfg)
    assert params.flat.tobytes() == g.flat.tobytes()


def test_local_update_zero_mse_is_pure_diig(tiny_ds):
    data = tiny_data(tiny_ds, 2)
    cfg = tiny_cfg(K=2)
    p, theta0 = _participant(data, cfg)
    q, _ = _participant(data, cfg, with_dist=False)
    theta_before = p.dist.theta.flat.copy()
    a, theta_after, _ = fed.local_update(p, theta0, p.dist.d_hat.copy(), 1, data.model, cfg)
    b, _, _ = fed.local_update(q, theta0, None, 1, data.model, cfg)
    assert a.flat.tobytes() == b.flat.tobytes()
    # zero MSE gradient leaves the estimator where it was
    assert theta_after.flat.tobytes() == theta_before.tobytes()


def test_local_update_single_step_trace(tiny_ds):
    data = tiny_data(tiny_ds, 1)
    cfg = tiny_cfg(K=1, windows_per_sequence=1, batch_size=64)
    p, theta0 = _participant(data, cfg, with_dist=False)
    rng = np.random.default_rng(np.random.SeedSequence([0, 1, 0]).spawn(3)[0])
    m, nw = p.shard.windows.shape[:2]
    (seq, win), = fed.epoch_batches(rng, m, nw, 1, 64)
    x = p.shard.windows[seq, win]
    y = diig.one_hot(p.shard.labels[seq], MODEL.C)
    _, grads = diig.loss_and_grads(MODEL, theta0, x, y, rng=rng)
    g = theta0.flatten(grads)
    m1 = 0.1 * g
    v1 = 0.001 * g * g
    expected = theta0.flat - 1.5e-3 * (m1 / 0.1) / (np.sqrt(v1 / 0.001) + 1e-8)
    params, _, _ = fed.local_update(p, theta0, None, 1, MODEL, cfg)
    np.testing.assert_allclose(params.flat, expected, rtol=0, atol=1e-15)


def test_local_update_name_mismatch(tiny_ds):
    data = tiny_data(tiny_ds, 1)
    cfg = tiny_cfg(K=1)
    p, _ = _participant(data, cfg, with_dist=False)
    with pytest.raises(ValueError):
        fed.local_update(p, ParamSet({"other": (2,)}), None, 1, MODEL, cfg)


def test_epoch_batches_cover():
    rng = np.random.default_rng(0)
    batches = fed.epoch_batches(rng, 5, 4, 0, 3)
    pairs = sorted((int(s), int(w)) for seq, win in batches for s, w in zip(seq, win))
    assert pairs == [(s, w) for s in range(5) for w in range(4)]
    batches = fed.epoch_batches(rng, 5, 4, 2, 3)
    seqs = np.concatenate([b[0] for b in batches])
    assert np.array_equal(np.bincount(seqs), [2] * 5)


# -------------------------------------------------------------- protocols

def test_fedrel_k1_matches_central(tiny_ds):
    data = tiny_data(tiny_ds, 1)
    a = fed.run_fedrel(tiny_cfg(K=1), data)
    b = fed.run_baseline("central", tiny_cfg(K=1, mode="central"), data)
    assert all(r.relevance == [1.0] for r in a)
    assert same(a, b)


def test_fedavg_k1_matches_central(tiny_ds):
    data = tiny_data(tiny_ds, 1)
    a = fed.run_baseline("fedavg", tiny_cfg(K=1, mode="fedavg"), data)
    b = fed.run_baseline("central", tiny_cfg(K=1, mode="central"), data)
    assert same(a, b)


def test_fedrel_identical_shards_equals_fedavg(tiny_ds):
    data = tiny_data(tiny_ds, 3, partition="identical")
    a = fed.run_fedrel(tiny_cfg(same_seed=True), data)
    b = fed.run_baseline("fedavg", tiny_cfg(same_seed=True, mode="fedavg"), data)
    assert same(a, b)


def test_fedp_full_fraction_equals_fedavg(tiny_ds):
    data = tiny_data(tiny_ds, 3)
    a = fed.run_baseline("fedp", tiny_cfg(mode="fedp", fedp_fraction=1.0), data)
    b = fed.run_baseline("fedavg", tiny_cfg(mode="fedavg"), data)
    assert same(a, b)


def test_fedp_samples_fraction(tiny_ds):
    data = tiny_data(tiny_ds, 5)
    recs = fed.run_baseline("fedp", tiny_cfg(K=5, mode="fedp", rounds=4), data)
    for r in recs:
        assert sum(v > 0 for v in r.relevance) == math.ceil(0.6 * 5)
        assert sum(r.relevance) == pytest.approx(1.0)


def test_fedatt_runs_and_relevance_sums(tiny_ds):
    data = tiny_data(tiny_ds, 3)
    servers = []
    recs = fed.run_baseline("fedatt", tiny_cfg(mode="fedatt"), data, server_out=servers)
    for r in recs:
        assert sum(r.relevance) == pytest.approx(1.0, abs=1e-12)
    assert len(servers[0].relevance_history) == 3


def test_fedrel_relevance_history(tiny_ds):
    data = tiny_data(tiny_ds, 3)
    servers = []
    recs = fed.run_fedrel(tiny_cfg(), data, server_out=servers)
    for r, h in zip(recs, servers[0].relevance_history):
        assert r.relevance == list(h)
        assert abs(sum(r.relevance) - 1.0) < 1e-12
    assert all(math.isfinite(r.global_loss) for r in recs)


def test_repeat_is_bitwise_identical(tiny_ds):
    data = tiny_data(tiny_ds, 3)
    assert same(fed.run_fedrel(tiny_cfg(), data), fed.run_fedrel(tiny_cfg(), data))


def test_concurrent_matches_sequential(tiny_ds):
    data = tiny_data(tiny_ds, 3)
    seq = fed.run_fedrel(tiny_cfg(), data)
    par = fed.run_fedrel(tiny_cfg(workers=3), data)
    assert same(seq, par)


def test_participant_failure_names_round_and_id(tiny_ds):
    data = tiny_data(tiny_ds, 3)
    data.shards[1].windows[:] = np.nan
    with pytest.raises(fed.ParticipantFailure, match=r"round 1, participant 1") as info:
        fed.run_baseline("fedavg", tiny_cfg(mode="fedavg"), data)
    assert info.value.round == 1 and info.value.pid == 1


def test_unknown_modes():
    with pytest.raises(ValueError):
        fed.FedConfig(mode="fedprox")
    with pytest.raises(ValueError):
        fed.run_baseline("fedrel", tiny_cfg(), None)


@pytest.mark.parametrize("kw", [{"rounds": 0}, {"fedp_fraction": 0.0}, {"fedp_fraction": 1.5}, {"K": 0}])
def test_config_invariants(kw):
    with pytest.raises(ValueError):
        fed.FedConfig(**kw)


def test_metrics_roundtrip(tiny_ds, tmp_path):
    data = tiny_data(tiny_ds, 2)
    cfg = tiny_cfg(K=2, rounds=2)
    path = tmp_path / "m.jsonl"
    w = MetricsWriter(path, cfg.to_dict(), cfg.seed)
    recs = fed.run_fedrel(cfg, data, on_round=w.write)
    header, back = read_metrics(path)
    assert header["seed"] == 0 and header["config"]["K"] == 2
    assert back == recs
