import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypersignal import diffcore as dc
from hypersignal import hypergraph as hg
from hypersignal.diffcore import Tensor


def _obs(rng, n):
    o = np.zeros((n, 16))
    o[np.arange(n), rng.integers(0, 4, size=n)] = 1.0
    o[:, 4:] = rng.integers(0, 12, size=(n, 12)) * 0.1
    return o


def test_embed_zero_and_saturated():
    obs = _obs(np.random.default_rng(0), 3)
    zero = hg.embed_observations(obs, dc.parameter(np.zeros((16, 8))), dc.parameter(np.zeros(8)))
    assert np.all(zero.data == 0)
    sat = hg.embed_observations(obs, dc.parameter(np.ones((16, 8))), dc.parameter(np.full(8, -1000.0)))
    assert np.all(sat.data == 0)


def test_embed_matches_loop_oracle():
    rng = np.random.default_rng(1)
    obs, w, b = _obs(rng, 4), rng.normal(size=(16, 5)), rng.normal(size=5)
    got = hg.embed_observations(obs, Tensor(w), Tensor(b)).data
    for i in range(4):
        for j in range(5):
            acc = b[j] + sum(obs[i, k] * w[k, j] for k in range(16))
            assert abs(got[i, j] - max(acc, 0.0)) < 1e-12
    with pytest.raises(dc.ShapeMismatch):
        hg.embed_observations(np.zeros((4, 15)), Tensor(w), Tensor(b))


def test_reconstruction_error_examples():
    h = np.array([[0.3, -0.2, 0.5]])
    zero = hg.reconstruction_error(h, h, Tensor(np.zeros((3, 3))), np.zeros((1, 1)))
    assert zero.data.tolist() == [0.0]
    perfect = hg.reconstruction_error(h, h, Tensor(np.eye(3)), np.ones((1, 1)))
    assert perfect.data.tolist() == [0.0]


def test_reconstruction_error_norm_oracle():
    rng = np.random.default_rng(2)
    masters, cands = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
    theta, p = rng.normal(size=(4, 4)), rng.uniform(size=(3, 5))
    got = hg.reconstruction_error(masters, cands, Tensor(theta), p).data
    for i in range(3):
        diff = [sum(masters[i, a] * theta[a, c] for a in range(4)) - sum(p[i, m] * cands[m, c] for m in range(5))
                for c in range(4)]
        assert abs(got[i] - math.sqrt(sum(x * x for x in diff))) < 1e-12
    with pytest.raises(dc.ShapeMismatch):
        hg.reconstruction_error(masters, cands, Tensor(theta), np.ones((3, 4)))


def test_select_candidates_examples():
    assert hg.select_candidates([0.05, 0.3, 0.15], 0.1) == [1, 2]
    assert hg.select_candidates([0.05, 0.1, -1.0], 0.1) == []
    assert hg.select_candidates([-0.5, 0.2], 0.1) == [1]


@settings(max_examples=100, deadline=None)
@given(
    p=st.lists(st.floats(-1, 1), min_size=1, max_size=10),
    z1=st.floats(0, 1),
    z2=st.floats(0, 1),
)
def test_selection_monotone_in_threshold(p, z1, z2):
    lo, hi = sorted((z1, z2))
    assert set(hg.select_candidates(p, hi)) <= set(hg.select_candidates(p, lo))


def test_recon_loss_examples():
    zero = hg.recon_loss(np.zeros(2), np.zeros(2), np.zeros((2, 1)), np.zeros((2, 2)), 0.001, 0.2)
    assert zero.item() == 0.0
    one = hg.recon_loss(np.zeros(1), np.zeros(1), np.zeros((1, 0)), np.array([[0.5]]), 0.001, 0.2)
    assert one.item() == pytest.approx(0.6, abs=1e-15)


def test_recon_loss_decreases_under_training():
    rng = np.random.default_rng(3)
    enc = hg.HypergraphEncoder(4, hg.HGConfig(d_embed=8), rng)
    obs_t, obs_tm1 = _obs(rng, 4), _obs(rng, 4)
    params = [enc.theta_spa, enc.theta_tem, enc.p_spa, enc.p_tem]
    opt = dc.Adam(params, lr=0.01)
    losses = []
    for _ in range(100):
        opt.zero_grad()
        out = enc.encode(obs_t, obs_tm1)
        dc.backward(out.recon)
        losses.append(out.recon.item())
        opt.step()
    assert losses[-1] < 0.5 * losses[0]


def test_incidence_rows():
    row = hg.incidence_weights(0, [], np.full(4, 0.5), 4)
    assert row.data.tolist() == [1.0, 0.0, 0.0, 0.0]
    row = hg.incidence_weights(2, [0, 3], np.array([0.3, 0.9, 0.0, 0.15]), 4)
    assert row.data.tolist() == [0.3, 0.0, 1.0, 0.15]
    assert np.count_nonzero(row.data) == 3


def test_hyperedge_embedding_examples():
    feats = np.array([[1.0, 0.0], [0.0, 1.0]])
    e = hg.hyperedge_embedding(np.array([1.0, 0.5]), feats)
    assert np.allclose(e.data, [2 / 3, 1 / 3], atol=1e-15)
    assert np.array_equal(hg.hyperedge_embedding(np.array([1.0, 0.0]), feats).data, feats[0])
    same = np.array([[0.2, -0.4]] * 3)
    assert np.allclose(hg.hyperedge_embedding(np.array([1.0, 0.7, 0.2]), same).data, same[0], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_hyperedge_embedding_in_convex_hull(seed):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(5, 3))
    re = np.concatenate([[1.0], rng.uniform(0, 1, size=4)])
    e = hg.hyperedge_embedding(re, feats).data
    assert np.all(e <= feats.max(axis=0) + 1e-12)
    assert np.all(e >= feats.min(axis=0) - 1e-12)


def _attn_params(rng, d, heads):
    dh = d // heads
    u = lambda shape, fan: dc.init_uniform(rng, shape, fan)  # noqa: E731
    return (u((d, d), d), u((d, d), d), u((d, d), d), u((heads, dh, dh), dh), u((heads, dh, dh), dh))


@pytest.mark.parametrize("heads", [1, 2, 4])
def test_attention_weights_properties(heads):
    rng = np.random.default_rng(4)
    d = 8
    h, es, et = rng.normal(size=(3, d)), rng.normal(size=(3, d)), rng.normal(size=(3, d))
    q, ks, kt, a_s, a_t = _attn_params(rng, d, heads)
    w, _, _ = hg.attention_weights(h, es, et, q, ks, kt, a_s, a_t, heads)
    assert w.shape == (3, heads, 2)
    assert np.all(w.data > 0)
    assert np.allclose(w.data.sum(axis=-1), 1.0, atol=1e-12)
    # identical hyperedges and parameters -> equal scores -> 0.5 each
    w, _, _ = hg.attention_weights(h, es, es, q, ks, ks, a_s, a_s, heads)
    assert np.allclose(w.data, 0.5, atol=1e-12)
    with pytest.raises(dc.ShapeMismatch):
        hg.attention_weights(h, es, et, q, ks, kt, a_s, a_t, 3)


def test_attention_shift_invariance():
    s = np.array([0.3, -1.2])
    assert np.allclose(dc.softmax(s).data, dc.softmax(s + 7.5).data, atol=1e-15)


def test_aggregate_spatial_endpoint():
    rng = np.random.default_rng(5)
    ks, kt = Tensor(rng.normal(size=(2, 1, 4))), Tensor(rng.normal(size=(2, 1, 4)))
    w = Tensor(np.tile([1.0, 0.0], (2, 1, 1)))
    pre = hg.aggregate_heads(w, ks, kt)
    assert np.array_equal(pre.data, ks.data.reshape(2, 4))


@pytest.mark.parametrize("heads", [1, 2, 8])
def test_encode_shapes(heads):
    rng = np.random.default_rng(6)
    enc = hg.HypergraphEncoder(4, hg.HGConfig(d_embed=8, heads=heads), rng)
    out = enc.encode(_obs(rng, 4), _obs(rng, 4))
    assert out.nodes.shape == (4, 8) and out.graph.shape == (8,)
    assert out.weights.shape == (4, heads, 2)
    batched = enc.encode(np.stack([_obs(rng, 4)] * 3), np.stack([_obs(rng, 4)] * 3))
    assert batched.nodes.shape == (3, 4, 8) and batched.graph.shape == (3, 8)


def test_permutation_equivariance():
    rng = np.random.default_rng(7)
    n = 4
    enc = hg.HypergraphEncoder(n, hg.HGConfig(d_embed=8), rng)
    enc.p_spa.data = rng.uniform(-0.2, 0.6, size=(n, n - 1))
    enc.p_tem.data = rng.uniform(-0.2, 0.6, size=(n, n))
    obs_t, obs_tm1 = _obs(rng, n), _obs(rng, n)
    base = enc.encode(obs_t, obs_tm1)

    perm = rng.permutation(n)
    full = hg.spread_offdiag(enc.p_spa).data[np.ix_(perm, perm)]
    enc2 = hg.HypergraphEncoder(n, hg.HGConfig(d_embed=8), np.random.default_rng(7))
    for name, t in enc.params().items():
        getattr(enc2, name).data = t.data.copy()
    enc2.p_spa.data = np.array([[full[i, j] for j in range(n) if j != i] for i in range(n)])
    enc2.p_tem.data = enc.p_tem.data[np.ix_(perm, perm)]
    moved = enc2.encode(obs_t[perm], obs_tm1[perm])
    assert np.allclose(moved.nodes.data, base.nodes.data[perm], atol=1e-12)
    assert np.allclose(moved.graph.data, base.graph.data, atol=1e-12)
    assert moved.recon.item() == pytest.approx(base.recon.item(), abs=1e-12)


def test_readout_examples():
    r = np.array([0.5, -1.0, 2.0])
    assert np.array_equal(hg.readout(np.stack([r, r, r])).data, r)
    assert np.array_equal(hg.readout(np.stack([r, -r])).data, np.zeros(3))
    rows = np.random.default_rng(8).normal(size=(5, 3))
    oracle = [sum(rows[i, j] for i in range(5)) / 5 for j in range(3)]
    assert np.allclose(hg.readout(rows).data, oracle, atol=1e-15)


def test_encode_zero_weights():
    enc = hg.HypergraphEncoder(3, hg.HGConfig(d_embed=4), np.random.default_rng(0))
    for t in enc.params().values():
        if t.name not in ("p_spa", "p_tem"):
            t.data[...] = 0.0
    out = enc.encode(np.zeros((3, 16)), np.zeros((3, 16)))
    assert np.all(out.nodes.data == 0)
    q_spa, q_tem = np.full((3, 2), 0.2), np.full((3, 3), 0.2)
    expected = sum(np.abs(q).sum() + 0.2 * np.linalg.norm(q, axis=1).sum() for q in (q_spa, q_tem))
    assert out.recon.item() == pytest.approx(expected, abs=1e-12)


def test_encode_gradcheck():
    rng = np.random.default_rng(9)
    enc = hg.HypergraphEncoder(3, hg.HGConfig(d_embed=8, heads=2), rng)
    enc.p_spa.data = rng.uniform(0.15, 0.6, size=(3, 2))
    enc.p_tem.data = rng.uniform(0.15, 0.6, size=(3, 3))
    obs_t, obs_tm1 = _obs(rng, 3), _obs(rng, 3)
    weights = rng.normal(size=(3, 8))
    for name, param in enc.params().items():
        def f(_):
            out = enc.encode(obs_t, obs_tm1)
            return dc.tsum(dc.mul(out.nodes, weights)) + out.recon

        res = dc.gradcheck(f, param)
        assert res.max_rel_error < 1e-3, name


def test_infinite_threshold_isolates_nodes():
    rng = np.random.default_rng(10)
    enc = hg.HypergraphEncoder(4, hg.HGConfig(d_embed=8, zeta=math.inf), rng)
    obs_t, obs_tm1 = _obs(rng, 4), _obs(rng, 4)
    out = enc.encode(obs_t, obs_tm1)
    assert out.spatial_members == [[]] * 4 and out.temporal_members == [[]] * 4
    changed_t, changed_tm1 = obs_t.copy(), obs_tm1.copy()
    changed_t[1:] = _obs(rng, 3)
    changed_tm1[1:] = _obs(rng, 3)
    other = enc.encode(changed_t, changed_tm1)
    assert np.array_equal(other.nodes.data[0], out.nodes.data[0])


def test_config_validation():
    with pytest.raises(ValueError):
        hg.HGConfig(d_embed=10, heads=3)
    with pytest.raises(ValueError):
        hg.HGConfig(zeta=-0.1)
    with pytest.raises(ValueError):
        hg.HGConfig(beta=1.5)
