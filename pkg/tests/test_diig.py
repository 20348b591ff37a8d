import math

import numpy as np
import pytest

from fedrel import diig, gradcheck
from fedrel import numerics as nx
from fedrel.numerics import ParamSet, Tensor

E = math.e


def small_cfg(**kw):
    base = dict(d=4, node_emb=5, graph_emb=6, readout_hidden=(3, 6), w=2, C=3, dropout=0.0)
    base.update(kw)
    return diig.ModelConfig(**base)


def consts(cfg, seed=0):
    ps = diig.init_params(cfg, seed)
    ps.flat += 0.1 * np.random.default_rng(seed + 1).standard_normal(ps.size)
    return ps, diig.as_constants(ps)


# ------------------------------------------------------------ transform

def test_transform_zero_weights():
    theta = {k: Tensor(np.zeros(s)) for k, s in diig.transform_shapes(8, 4).items()}
    out = diig.transform_features(np.random.default_rng(0).standard_normal((5, 3, 8)), theta)
    assert out.shape == (5, 3, 4)
    assert np.array_equal(out.data, np.zeros((5, 3, 4)))


def test_transform_dim_mismatch():
    theta = {k: Tensor(np.zeros(s)) for k, s in diig.transform_shapes(8, 4).items()}
    with pytest.raises(ValueError):
        diig.transform_features(np.zeros((5, 3, 7)), theta)


def test_transform_gradient():
    rng = np.random.default_rng(0)
    shapes = diig.transform_shapes(6, 3, hidden=5)
    names = list(shapes)
    args = [rng.standard_normal((2, 4, 6))] + [rng.standard_normal(shapes[n]) for n in names]

    def build(s, *ws):
        return diig.transform_features(s, dict(zip(names, ws)))

    assert gradcheck.check_function(build, args) < 1e-4


# ---------------------------------------------------- intra correlation

def test_intra_hand_values():
    a = diig.intra_correlation(np.array([[1.0, 0.0], [0.0, 1.0]]), np.eye(2)).data
    np.testing.assert_allclose(a, [[E / (E + 1), 1 / (E + 1)], [1 / (E + 1), E / (E + 1)]], atol=1e-15)
    assert a[0, 0] == pytest.approx(0.7311, abs=1e-4)


def test_intra_identical_nodes_uniform():
    x = np.tile(np.random.default_rng(0).standard_normal(4), (5, 1))
    a = diig.intra_correlation(x, np.random.default_rng(1).standard_normal((4, 4))).data
    np.testing.assert_allclose(a, np.full((5, 5), 0.2), atol=1e-15)


def test_intra_rows_sum_to_one():
    rng = np.random.default_rng(2)
    a = diig.intra_correlation(rng.standard_normal((3, 6, 4)), rng.standard_normal((4, 4))).data
    np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-12)
    assert (a > 0).all()


# -------------------------------------------------------- message passing

def test_message_pass_zero_weights():
    out = diig.message_pass(np.full((3, 3), 1 / 3), np.ones((3, 2)), np.zeros((4, 5)), np.zeros(5)).data
    assert np.array_equal(out, np.full((3, 5), 0.5))


def test_message_pass_single_node():
    out = diig.message_pass(np.ones((1, 1)), np.array([[2.0]]), np.array([[1.0], [1.0]]))
    assert out.data[0, 0] == pytest.approx(1 / (1 + math.exp(-4.0)))


def test_message_pass_loop_oracle():
    rng = np.random.default_rng(3)
    n, d_in, d_out = 4, 3, 5
    a = rng.dirichlet(np.ones(n), size=n)
    h = rng.standard_normal((n, d_in))
    w = rng.standard_normal((2 * d_in, d_out))
    b = rng.standard_normal(d_out)
    out = diig.message_pass(a, h, w, b).data
    for i in range(n):
        agg = sum(a[i, j] * h[j] for j in range(n)) / n
        z = np.concatenate([h[i], agg]) @ w + b
        np.testing.assert_allclose(out[i], 1 / (1 + np.exp(-z)), atol=1e-12)


def test_message_pass_permutation_equivariant():
    rng = np.random.default_rng(4)
    a = rng.dirichlet(np.ones(5), size=5)
    h = rng.standard_normal((5, 3))
    w, b = rng.standard_normal((6, 4)), rng.standard_normal(4)
    perm = rng.permutation(5)
    out = diig.message_pass(a, h, w, b).data
    out_p = diig.message_pass(a[perm][:, perm], h[perm], w, b).data
    np.testing.assert_allclose(out_p, out[perm], atol=1e-14)


def test_message_pass_shape_mismatch():
    with pytest.raises(ValueError):
        diig.message_pass(np.ones((3, 3)), np.ones((4, 2)), np.ones((4, 2)))
    with pytest.raises(ValueError):
        diig.message_pass(np.ones((3, 3)), np.ones((3, 2)), np.ones((5, 2)))


# ---------------------------------------------------------------- readout

def _pool(rng, widths):
    return [(rng.standard_normal((widths[i], widths[i + 1])), rng.standard_normal(widths[i + 1]))
            for i in range(len(widths) - 1)]


def test_readout_oracle():
    rng = np.random.default_rng(5)
    h, x = rng.standard_normal((4, 5)), rng.standard_normal((4, 3))
    pool = _pool(rng, (8, 3, 6, 7))
    got = diig.graph_readout(h, x, [(Tensor(w), Tensor(b)) for w, b in pool]).data
    z = np.concatenate([h, x], axis=1).mean(axis=0)
    for i, (w, b) in enumerate(pool):
        z = z @ w + b
        if i < len(pool) - 1:
            z = 1 / (1 + np.exp(-z))
    np.testing.assert_allclose(got, z, atol=1e-12)


def test_readout_permutation_invariant():
    rng = np.random.default_rng(6)
    h, x = rng.standard_normal((4, 5)), rng.standard_normal((4, 3))
    pool = [(Tensor(w), Tensor(b)) for w, b in _pool(rng, (8, 3, 6))]
    perm = [2, 0, 3, 1]
    np.testing.assert_allclose(diig.graph_readout(h, x, pool).data,
                               diig.graph_readout(h[perm], x[perm], pool).data, atol=1e-14)


def test_readout_zero_constant():
    pool = [(Tensor(np.zeros((5, 3))), Tensor(np.zeros(3))), (Tensor(np.zeros((3, 2))), Tensor(np.zeros(2)))]
    out = diig.graph_readout(np.zeros((4, 3)), np.zeros((4, 2)), pool).data
    assert np.array_equal(out, np.zeros(2))


# ----------------------------------------------------------------- fusion

def test_fusion_rows():
    rng = np.random.default_rng(7)
    h = np.tile(rng.standard_normal(5), (3, 1))
    out = diig.fuse_embeddings(h, rng.standard_normal(6), rng.standard_normal((11, 5)), rng.standard_normal(5)).data
    np.testing.assert_allclose(out[0], out[1], atol=0)
    np.testing.assert_allclose(out[0], out[2], atol=0)
    h2 = rng.standard_normal((4, 5))
    out2 = diig.fuse_embeddings(h2, rng.standard_normal(6), rng.standard_normal((11, 5))).data
    assert np.abs(out2.mean(axis=-1)).max() < 1e-10


def test_fusion_gradient():
    rng = np.random.default_rng(8)
    args = [rng.standard_normal((3, 4)), rng.standard_normal(5), rng.standard_normal((9, 4)),
            rng.standard_normal(4), rng.standard_normal(4), rng.standard_normal(4)]
    assert gradcheck.check_function(diig.fuse_embeddings, args) < 1e-4


# ---------------------------------------------------------- inter / temporal

def test_inter_hand_values():
    a = diig.inter_correlation(np.eye(2), np.eye(2), np.eye(2)).data
    np.testing.assert_allclose(a[0], [E / (E + 1), 1 / (E + 1)], atol=1e-15)


def test_inter_uniform_and_mismatch():
    h = np.tile([0.3, -0.2, 0.5], (4, 1))
    np.testing.assert_allclose(diig.inter_correlation(h, h, np.eye(3)).data, 0.25, atol=1e-15)
    with pytest.raises(ValueError):
        diig.inter_correlation(np.ones((3, 2)), np.ones((4, 2)), np.eye(2))


def test_temporal_w0_identity():
    h = np.random.default_rng(9).standard_normal((1, 4, 5))
    out = diig.temporal_propagate(h, np.eye(5), np.ones((10, 5)), w=0).data
    assert np.array_equal(out, h[0])


def test_temporal_w1_composition():
    rng = np.random.default_rng(10)
    hf = rng.standard_normal((2, 4, 5))
    wt, wa, b = rng.standard_normal((5, 5)), rng.standard_normal((10, 5)), rng.standard_normal(5)
    a = diig.inter_correlation(hf[1], hf[0], wt)
    expected = diig.message_pass(a, hf[0], wa, b).data
    assert np.array_equal(diig.temporal_propagate(hf, wt, wa, b, w=1).data, expected)


@pytest.mark.parametrize("w", [0, 1, 2, 3, 4])
def test_temporal_shapes(w):
    rng = np.random.default_rng(w)
    out = diig.temporal_propagate(rng.standard_normal((w + 1, 3, 5)), rng.standard_normal((5, 5)),
                                  rng.standard_normal((10, 5)), w=w)
    assert out.shape == (3, 5)


def test_temporal_window_mismatch():
    with pytest.raises(ValueError):
        diig.temporal_propagate(np.zeros((3, 2, 2)), np.eye(2), np.ones((4, 2)), w=1)


# ------------------------------------------------------------------- head

def test_final_embedding_zero_weights():
    out = diig.final_embedding(np.ones((3, 4)), np.ones((3, 4)), np.zeros((8, 2)))
    assert out.shape == (3, 2) and np.array_equal(out.data, np.full((3, 2), 0.5))


def test_final_embedding_gradient():
    rng = np.random.default_rng(11)
    args = [rng.standard_normal((3, 4)), rng.standard_normal((3, 4)), rng.standard_normal((8, 2)),
            rng.standard_normal(2)]
    assert gradcheck.check_function(diig.final_embedding, args) < 1e-4


def test_predict_logits_examples():
    np.testing.assert_allclose(diig.predict_logits(np.full((4, 3), 0.7)).data, 1 / 3, atol=1e-15)
    row = np.array([[0.2, 1.5, -0.3]])
    np.testing.assert_allclose(diig.predict_logits(row).data, nx.softmax_row(row).data[0], atol=0)
    two = np.array([[0.0, math.log(2)], [0.0, math.log(2)]])
    np.testing.assert_allclose(diig.predict_logits(two).data, [1 / 3, 2 / 3], atol=1e-15)


def test_loss_examples():
    assert diig.classification_loss(np.array([1.0, 0.0]), np.array([1.0, 0.0])).data <= 1e-6
    assert diig.classification_loss(np.array([0.5, 0.5]), np.array([0.0, 1.0])).data == pytest.approx(math.log(2))
    assert diig.classification_loss(np.array([0.0, 1.0]), np.array([1.0, 0.0])).data == pytest.approx(-math.log(1e-12))
    with pytest.raises(ValueError):
        diig.classification_loss(np.array([0.5, 0.5]), np.array([1.0, 1.0]))


def test_head_loss_floor():
    # sigmoid outputs in (0, 1) cap the node-mean logit gap at 1, so with
    # C classes the loss can never go below -log(e / (e + C - 1))
    C = 4
    h_best = np.zeros((6, C))
    h_best[:, 0] = 1.0
    z = diig.predict_logits(h_best).data
    y = diig.one_hot(0, C)
    floor = -math.log(E / (E + C - 1))
    assert diig.classification_loss(z, y).data == pytest.approx(floor, abs=1e-12)
    assert floor > 0.74


# ----------------------------------------------------------------- model

def test_forward_shapes_and_rows():
    cfg = small_cfg()
    _, p = consts(cfg)
    x = np.random.default_rng(0).standard_normal((7, 3, 4, 4))
    fw = diig.forward(cfg, p, x)
    assert fw.probs.shape == (7, 3)
    np.testing.assert_allclose(fw.probs.data.sum(-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(fw.a_spa.data.sum(-1), 1.0, atol=1e-12)


def test_forward_single_window_matches_batch():
    cfg = small_cfg()
    _, p = consts(cfg)
    x = np.random.default_rng(1).standard_normal((3, 3, 4, 4))
    batch = diig.forward(cfg, p, x).probs.data
    for i in range(3):
        np.testing.assert_allclose(diig.forward(cfg, p, x[i]).probs.data[0], batch[i], atol=1e-14)


def test_forward_node_permutation_invariant():
    cfg = small_cfg()
    _, p = consts(cfg)
    x = np.random.default_rng(2).standard_normal((2, 3, 4, 4))
    perm = [3, 1, 0, 2]
    np.testing.assert_allclose(diig.forward(cfg, p, x).probs.data, diig.forward(cfg, p, x[:, :, perm]).probs.data,
                               atol=1e-13)


def test_forward_w0_temporal_identity():
    cfg = small_cfg(w=0)
    _, p = consts(cfg)
    fw = diig.forward(cfg, p, np.random.default_rng(3).standard_normal((2, 1, 4, 4)))
    assert np.array_equal(fw.h_tem.data, fw.h_fuse.data[:, 0])


def test_forward_bad_shapes():
    cfg = small_cfg()
    _, p = consts(cfg)
    with pytest.raises(ValueError):
        diig.forward(cfg, p, np.zeros((2, 2, 4, 4)))
    with pytest.raises(ValueError):
        diig.forward(cfg, p, np.zeros((2, 3, 4, 5)))


def test_dropout_only_with_rng():
    cfg = small_cfg(dropout=0.3)
    _, p = consts(cfg)
    x = np.random.default_rng(4).standard_normal((2, 3, 4, 4))
    a, b = diig.forward(cfg, p, x).probs.data, diig.forward(cfg, p, x).probs.data
    assert np.array_equal(a, b)
    c = diig.forward(cfg, p, x, rng=np.random.default_rng(0)).probs.data
    assert not np.array_equal(a, c)


def test_static_adjacency_substitution():
    cfg = small_cfg()
    _, p = consts(cfg)
    x = np.random.default_rng(5).standard_normal((2, 3, 4, 4))
    adj = np.full((4, 4), 0.25)
    fw = diig.forward(cfg, p, x, adjacency=adj)
    np.testing.assert_array_equal(fw.a_spa.data[0, 0], adj)


def test_param_names_stable():
    names = list(diig.param_shapes(diig.ModelConfig()))
    assert names[:3] == ["W_spa", "W_agg_1", "b_agg_1"]
    assert names[-2:] == ["W_o", "b_o"]
    assert diig.param_shapes(diig.ModelConfig())["W_pool_3"] == (64, 64)


def test_init_params():
    ps = diig.init_params(diig.ModelConfig(), 0)
    assert np.array_equal(ps["ln_gamma"], np.ones(32))
    assert np.array_equal(ps["b_fuse"], np.zeros(32))
    assert np.array_equal(ps.flat, diig.init_params(diig.ModelConfig(), 0).flat)


@pytest.mark.parametrize("kw", [{"L": 0}, {"w": -1}, {"d": 0}, {"C": 1}, {"dropout": 1.0}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        diig.ModelConfig(**kw)


def test_full_model_gradient():
    assert gradcheck.diig_check() < 1e-4


# ------------------------------------------------------------- checkpoint

def test_checkpoint_roundtrip(tmp_path):
    ps = diig.init_params(diig.ModelConfig(), 3)
    ps.flat += np.random.default_rng(0).standard_normal(ps.size)
    diig.save_params(ps, tmp_path / "m.frpm")
    back = diig.load_params(tmp_path / "m.frpm")
    assert back.names == ps.names and back.flat.tobytes() == ps.flat.tobytes()


def test_checkpoint_errors(tmp_path):
    from fedrel.synthdata import MalformedHeader, TruncatedPayload

    ps = diig.init_params(small_cfg(), 0)
    p = tmp_path / "m.frpm"
    diig.save_params(ps, p)
    raw = p.read_bytes()
    p.write_bytes(raw[:-3])
    with pytest.raises(TruncatedPayload):
        diig.load_params(p)
    p.write_bytes(b"XXXXX" + raw[5:])
    with pytest.raises(MalformedHeader):
        diig.load_params(p)


# --------------------------------------------------------------- training

def test_pretrain_transform_learns():
    from fedrel import synthdata as sd

    ds = sd.generate(sd.GeneratorConfig(num_sequences=80), 1)
    theta = diig.pretrain_transform(ds.values(), ds.labels, 4, epochs=3, seed=0)
    assert set(theta.names) == {"W_t1", "b_t1", "W_t2", "b_t2"}
    again = diig.pretrain_transform(ds.values(), ds.labels, 4, epochs=3, seed=0)
    assert np.array_equal(theta.flat, again.flat)


@pytest.mark.xfail(strict=True, reason="sigmoid-then-softmax head bounds the loss below by "
                   "-log(e/(e+3)) = 0.744 for four classes, so a 50% cut from ~1.39 is unreachable")
def test_training_loss_halves(central_run):
    recs, _ = central_run
    assert recs[-1].train_loss <= 0.5 * recs[0].train_loss


def test_training_loss_falls_toward_floor(central_run):
    recs, _ = central_run
    floor = -math.log(E / (E + 3))
    assert recs[-1].train_loss < recs[0].train_loss
    assert recs[-1].train_loss >= floor - 1e-9
    # most of the attainable reduction is realised
    assert (recs[0].train_loss - recs[-1].train_loss) / (recs[0].train_loss - floor) > 0.7
