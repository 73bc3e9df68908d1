import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hyperens import layers as L
from hyperens.diffcore import grad_check, ops, Tensor
from hyperens.hyperdist import HyperSchema

SCHEMA = HyperSchema(["l2_w", "dropout"], [(1e-3, 1e3), (1e-3, 0.9)], ["l2", "dropout"])


def lam_rows(gen, n, schema=SCHEMA):
    lo, hi = np.log(schema.lower), np.log(schema.upper)
    return np.exp(gen.uniform(lo, hi, size=(n, schema.m)))


def randomize(layer, gen, skip=()):
    for name, p in layer.params().items():
        if name not in skip:
            p.values[...] = gen.normal(size=p.values.shape)


def conv_ref(x, k, stride=1, padding="valid"):
    return ops.conv2d(Tensor(x), Tensor(k), stride, padding).values


def test_batch_ens_unit_factors_is_dense(gen):
    be = L.BatchEnsembleDense(4, 3, 1, gen, rank1_init="ones")
    be.b.values[...] = gen.normal(size=(1, 3))
    X = gen.normal(size=(5, 4))
    out = be(X, np.zeros(5, int)).values
    np.testing.assert_array_equal(out, X @ be.W.values + be.b.values[0])


def test_batch_ens_tiled_equals_member_passes(gen):
    be = L.BatchEnsembleDense(4, 3, 2, gen)
    be.b.values[...] = gen.normal(size=(2, 3))
    X = gen.normal(size=(3, 4))
    Xt, members, _ = L.tile_minibatch(X, 2)
    out = L.split_members(be(Xt, members).values, 2)
    for k in range(2):
        W, b = be.materialize(k)
        np.testing.assert_allclose(out[k], X @ W + b, rtol=0, atol=1e-12)


@given(st.floats(0.1, 10.0))
def test_batch_ens_rank1_scale_invariance(c):
    gen = np.random.default_rng(0)
    be = L.BatchEnsembleDense(3, 2, 2, gen)
    X = gen.normal(size=(4, 3))
    m = np.array([0, 1, 1, 0])
    before = be(X, m).values
    be.r.values *= c
    be.s.values /= c
    np.testing.assert_allclose(be(X, m).values, before, rtol=1e-12, atol=1e-12)


def test_stn_zero_embedding_is_dense(gen):
    stn = L.STNDense(3, 2, SCHEMA, gen)
    X = gen.normal(size=(4, 3))
    out = stn(X, lam=lam_rows(gen, 4)).values
    np.testing.assert_array_equal(out, X @ stn.W.values + stn.b.values)


def test_stn_hand_expansion_2x2(gen):
    s2 = HyperSchema(["a", "b"], [(0.1, 10.0), (0.1, 10.0)], ["l2", "l2"])
    stn = L.STNDense(2, 2, s2, gen)
    randomize(stn, gen)
    C = stn.embedding.C.values
    lam = np.array([[0.5, 3.0]])
    x = np.array([[1.5, -0.7]])
    z = 2 * (np.log(lam[0]) - np.log(0.1)) / (np.log(10.0) - np.log(0.1)) - 1
    e = [z[0] * C[0, j] + z[1] * C[1, j] for j in range(2)]
    e2 = [z[0] * C[0, 2 + j] + z[1] * C[1, 2 + j] for j in range(2)]
    W, D, b, d = stn.W.values, stn.Delta.values, stn.b.values, stn.delta.values
    hand = [sum(x[0, i] * (W[i, j] + D[i, j] * e[j]) for i in range(2)) + b[j] + d[j] * e2[j]
            for j in range(2)]
    np.testing.assert_allclose(stn(x, lam=lam).values[0], hand, rtol=1e-13)


def test_stn_per_row_lambda(gen):
    stn = L.STNDense(3, 2, SCHEMA, gen)
    randomize(stn, gen)
    X, lam = gen.normal(size=(2, 3)), lam_rows(gen, 2)
    both = stn(X, lam=lam).values
    for i in range(2):
        np.testing.assert_allclose(both[i], stn(X[i:i + 1], lam=lam[i:i + 1]).values[0], atol=1e-14)


@pytest.mark.parametrize("couple", [False, True])
def test_hyper_batch_dense_tiled_equals_materialized(gen, couple):
    K = 3
    hb = L.HyperBatchDense(4, 3, K, SCHEMA, gen, couple_uv_to_rs=couple)
    randomize(hb, gen)
    X = gen.normal(size=(5, 4))
    lam_k = lam_rows(gen, K)
    Xt, members, lr = L.tile_minibatch(X, K, lam_k)
    out = L.split_members(hb(Xt, members, lr).values, K)
    for k in range(K):
        W, b = hb.materialize(k, lam_k[k])
        np.testing.assert_allclose(out[k], X @ W + b, rtol=0, atol=1e-12)


def test_hyper_batch_dense_reductions(gen):
    hb = L.HyperBatchDense(4, 3, 2, SCHEMA, gen)
    randomize(hb, gen, skip=("emb.C",))
    X = gen.normal(size=(6, 4))
    m = np.array([0, 1, 0, 1, 1, 0])
    lam = lam_rows(gen, 6)
    be = L.BatchEnsembleDense(4, 3, 2, gen)
    for name in ("W", "r", "s", "b"):
        be.params()[name].values[...] = hb.params()[name].values
    np.testing.assert_array_equal(hb(X, m, lam).values, be(X, m).values)

    hb1 = L.HyperBatchDense(4, 3, 1, SCHEMA, gen, rank1_init="ones")
    randomize(hb1, gen, skip=("r", "s", "u", "v"))
    stn = L.STNDense(4, 3, SCHEMA, gen)
    for name in ("W", "Delta", "emb.C"):
        stn.params()[name].values[...] = hb1.params()[name].values
    stn.b.values[...] = hb1.b.values[0]
    stn.delta.values[...] = hb1.delta.values[0]
    np.testing.assert_array_equal(hb1(X, np.zeros(6, int), lam).values, stn(X, lam=lam).values)


def test_hyper_batch_conv_1x1_scalar(gen):
    hb = L.HyperBatchConv(1, 1, 1, 1, SCHEMA, gen, rank1_init="ones")
    X = gen.normal(size=(2, 3, 3, 1))
    out = hb(X, np.zeros(2, int), lam_rows(gen, 2)).values
    np.testing.assert_array_equal(out, X * hb.W.values[0, 0, 0, 0])


@pytest.mark.parametrize("padding,stride", [("valid", 1), ("same", 1), ("valid", 2)])
def test_hyper_batch_conv_tiled_equals_materialized(gen, padding, stride):
    K = 2
    hb = L.HyperBatchConv(3, 2, 3, K, SCHEMA, gen, stride=stride, padding=padding)
    randomize(hb, gen)
    X = gen.normal(size=(2, 6, 6, 2))
    lam_k = lam_rows(gen, K)
    Xt, members, lr = L.tile_minibatch(X, K, lam_k)
    out = L.split_members(hb(Xt, members, lr).values, K)
    for k in range(K):
        Kk, b = hb.materialize(k, lam_k[k])
        np.testing.assert_allclose(out[k], conv_ref(X, Kk, stride, padding) + b, atol=1e-12)


def test_embedding_linear_identity(gen):
    s = HyperSchema(["a", "b", "c"], [(1e-2, 1e2)] * 3, ["l2"] * 3)
    emb = L.Embedding(s, 3)
    lam = lam_rows(gen, 4, s)
    e, e2 = emb(lam)
    np.testing.assert_array_equal(e.values, 0.0)
    emb.C.values[:, :3] = np.eye(3)
    e, _ = emb(lam)
    np.testing.assert_allclose(e.values, s.normalize(lam), atol=1e-14)


def test_embedding_mlp_bound(gen):
    emb = L.Embedding(SCHEMA, 5, "mlp_tanh_64", gen)
    randomize(emb, gen)
    e, e2 = emb(lam_rows(gen, 500))
    bound = emb.output_bound()
    assert np.all(np.abs(e.values) <= bound[:5] + 1e-12)
    assert np.all(np.abs(e2.values) <= bound[5:] + 1e-12)


def test_dropout_modes_and_statistics(gen):
    X = gen.normal(size=(10, 4))
    for mode in ("train", "eval"):
        np.testing.assert_array_equal(L.dropout(X, 0.0, mode, gen).values, X)
    np.testing.assert_array_equal(L.dropout(X, 0.7, "eval").values, X)
    ones = np.ones((1000, 100))
    out = L.dropout(ones, 0.5, "train", np.random.default_rng(5)).values
    n = ones.size
    kept = np.mean(out > 0)
    sigma = np.sqrt(0.25 / n)
    assert abs(kept - 0.5) < 3 * sigma
    assert abs(out.mean() - 1.0) < 3 * 2 * sigma  # each entry is 0 or 2
    with pytest.raises(ValueError):
        L.dropout(X, 0.99, "train", gen)


def test_tile_layout_and_roundtrip(gen):
    X = gen.normal(size=(2, 3))
    Xt, members, _ = L.tile_minibatch(X, 1)
    np.testing.assert_array_equal(Xt, X)
    Xt, members, _ = L.tile_minibatch(X, 3)
    np.testing.assert_array_equal(members, [0, 0, 1, 1, 2, 2])
    for k in range(3):
        np.testing.assert_array_equal(L.split_members(Xt, 3)[k], X)
    np.testing.assert_allclose(L.untile(Xt, 3), X, rtol=1e-15)


@pytest.mark.parametrize("r,K", [(64, 1), (64, 4), (128, 2)])
def test_parameter_count_ratio(gen, r, K):
    hb = L.HyperBatchDense(r, r, K, SCHEMA, gen)
    be = L.BatchEnsembleDense(r, r, K, gen)
    emb = hb.embedding.param_count()
    assert hb.param_count() == 2 * r * r + K * (2 * r + 2 * r + 2 * r) + emb
    assert 1.9 < hb.param_count() / be.param_count() < 2.6


def test_layer_gradients(gen):
    K = 2
    X = gen.normal(size=(3, 3))
    Xt, members, lr = L.tile_minibatch(X, K, lam_rows(gen, K))
    for arch in ("linear", "mlp_tanh_64"):
        hb = L.HyperBatchDense(3, 2, K, SCHEMA, gen, embedding=arch)
        randomize(hb, gen)
        params = hb.params()
        rep = grad_check(lambda **_: (hb(Xt, members, lr) ** 2).sum(), dict(params))
        assert rep.passed and set(rep.errors) == set(params), str(rep)
    Xc = gen.normal(size=(2, 5, 5, 2))
    Xt, members, lr = L.tile_minibatch(Xc, K, lam_rows(gen, K))
    hc = L.HyperBatchConv(3, 2, 2, K, SCHEMA, gen)
    randomize(hc, gen)
    rep = grad_check(lambda **_: (hc(Xt, members, lr) ** 2).sum(), dict(hc.params()))
    assert rep.passed, str(rep)


def test_member_index_out_of_range(gen):
    hb = L.HyperBatchDense(2, 2, 2, SCHEMA, gen)
    with pytest.raises(IndexError):
        hb(np.ones((1, 2)), np.array([2]), lam_rows(gen, 1))
