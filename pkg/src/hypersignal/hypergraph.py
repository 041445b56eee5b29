"""Spatio-temporal hypergraph encoder for the centralized critics.

Each intersection is a master node with one spatial hyperedge (other
intersections at time t) and one temporal hyperedge (all intersections at
t-1). Membership comes from trainable, nonnegative reconstruction
coefficients cut at a threshold; hyperedge embeddings are coefficient
weighted means; a per-head attention picks between the two hyperedges
before a shallow MLP produces the updated node embedding.

All functions accept an optional leading batch axis on feature tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .simulator import OBS_DIM


@dataclass
class HGConfig:
    d_embed: int = 32
    heads: int = 1
    zeta: float = 0.1
    lam: float = 0.001
    gamma2: float = 0.2
    beta: float = 0.001
    coef_init: float = 0.2

    def __post_init__(self):
        if self.d_embed < 1 or self.heads < 1 or self.d_embed % self.heads:
            raise ValueError("d_embed must be a positive multiple of heads")
        if self.zeta < 0:
            raise ValueError("zeta must be >= 0")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")

    @property
    def head_dim(self) -> int:
        return self.d_embed // self.heads


def embed_observations(obs, w_e: Tensor, b_e: Tensor) -> Tensor:
    obs = dc.as_tensor(obs)
    if obs.shape[-1] != w_e.shape[0]:
        raise dc.ShapeMismatch(f"observation width {obs.shape[-1]} != {w_e.shape[0]}")
    return dc.relu(obs @ w_e + b_e)


def reconstruction_error(masters, candidates, theta: Tensor, coeffs) -> Tensor:
    """``|| h_i theta - p_i . H(candidates) ||_2`` for each master row.

    masters: (..., R, d); candidates: (..., M, d); coeffs: (R, M).
    Returns shape (..., R).
    """
    masters, candidates, coeffs = dc.as_tensor(masters), dc.as_tensor(candidates), dc.as_tensor(coeffs)
    if coeffs.shape[-1] != candidates.shape[-2] or coeffs.shape[-2] != masters.shape[-2]:
        raise dc.ShapeMismatch(
            f"coefficients {coeffs.shape} do not match masters {masters.shape} / candidates {candidates.shape}"
        )
    return dc.l2_norm(masters @ theta - coeffs @ candidates, axis=-1)


def effective(raw) -> Tensor:
    """Raw coefficients are made nonnegative before any use."""
    return dc.relu(raw)


def selection_mask(coeffs, zeta: float) -> np.ndarray:
    c = coeffs.data if isinstance(coeffs, Tensor) else np.asarray(coeffs, dtype=float)
    mask = np.maximum(c, 0.0) > zeta
    dc.record_decision(mask)
    return mask


def select_candidates(coeffs, zeta: float) -> list[int]:
    return [int(k) for k in np.flatnonzero(selection_mask(np.ravel(dc.as_tensor(coeffs).data), zeta))]


def incidence_weights(master: int, members, coeffs, n_nodes: int) -> Tensor:
    """Row of the incidence matrix: 1 at the master, the effective coefficient at members."""
    coeffs = effective(dc.as_tensor(coeffs))
    members = list(members)
    one_hot = np.zeros(n_nodes)
    one_hot[master] = 1.0
    if not members:
        return Tensor(one_hot)
    gate = np.zeros(n_nodes)
    gate[members] = 1.0
    return dc.add(one_hot, dc.mul(coeffs, gate))


def hyperedge_embedding(re, features) -> Tensor:
    """Incidence-weighted mean of node features; ``re`` is (E, V) or (V,), features (..., V, d)."""
    re, features = dc.as_tensor(re), dc.as_tensor(features)
    if re.ndim == 1:
        return dc.div(re @ features, dc.tsum(re))
    return dc.div(re @ features, dc.tsum(re, axis=-1, keepdims=True))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    return x.reshape(*x.shape[:-1], heads, x.shape[-1] // heads)


def attention_scores(query: Tensor, key: Tensor, theta_att: Tensor) -> Tensor:
    """Bilinear scores per head. query/key: (..., K, dh); theta_att: (K, dh, dh) -> (..., K)."""
    dh = query.shape[-1]
    proj = (dc.reshape(query, (*query.shape[:-1], 1, dh)) @ theta_att).reshape(query.shape)
    return dc.scale(dc.tsum(dc.mul(proj, key), axis=-1), 1.0 / np.sqrt(dh))


def attention_weights(h_master, e_spa, e_tem, q_lin, k_spa, k_tem, att_spa, att_tem, heads: int):
    """Per-head softmax weights over the spatial and temporal hyperedge.

    Returns ``(weights (..., K, 2), keys_spa (..., K, dh), keys_tem (..., K, dh))``
    where ``weights[..., 0]`` is the spatial weight.
    """
    if q_lin.shape[-1] % heads:
        raise dc.ShapeMismatch("projection width not divisible by heads")
    query = _split_heads(dc.as_tensor(h_master) @ q_lin, heads)
    key_s = _split_heads(dc.as_tensor(e_spa) @ k_spa, heads)
    key_t = _split_heads(dc.as_tensor(e_tem) @ k_tem, heads)
    s_spa = attention_scores(query, key_s, att_spa)
    s_tem = attention_scores(query, key_t, att_tem)
    scores = dc.concat([s_spa.reshape(*s_spa.shape, 1), s_tem.reshape(*s_tem.shape, 1)], axis=-1)
    return dc.softmax(scores, axis=-1), key_s, key_t


def aggregate_heads(weights: Tensor, key_s: Tensor, key_t: Tensor) -> Tensor:
    """Concatenate over heads of ``w_spa * K_spa + w_tem * K_tem``."""
    w_s = dc.take(weights, (..., slice(0, 1)))
    w_t = dc.take(weights, (..., slice(1, 2)))
    mixed = dc.add(dc.mul(w_s, key_s), dc.mul(w_t, key_t))
    return mixed.reshape(*mixed.shape[:-2], mixed.shape[-2] * mixed.shape[-1])


def node_mlp(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return dc.relu(x @ w1 + b1) @ w2 + b2


def readout(nodes) -> Tensor:
    """Mean over the node axis."""
    nodes = dc.as_tensor(nodes)
    return dc.mean(nodes, axis=-2)


def recon_loss(c_spa, c_tem, q_spa, q_tem, lam: float, gamma2: float) -> Tensor:
    """Hyperedge generation loss summed over masters.

    c_spa, c_tem: reconstruction errors (..., N), averaged over any batch axes.
    q_spa, q_tem: effective coefficient matrices (N, N-1) and (N, N).
    """
    c_spa, c_tem = dc.as_tensor(c_spa), dc.as_tensor(c_tem)
    batch_axes = tuple(range(c_spa.ndim - 1))
    if batch_axes:
        c_spa = dc.mean(c_spa, axis=batch_axes)
        c_tem = dc.mean(c_tem, axis=batch_axes)
    err = dc.scale(dc.tsum(c_spa + c_tem), lam)
    l1 = dc.tsum(dc.l1_norm(q_spa, axis=-1)) + dc.tsum(dc.l1_norm(q_tem, axis=-1))
    l2 = dc.tsum(dc.l2_norm(q_spa, axis=-1)) + dc.tsum(dc.l2_norm(q_tem, axis=-1))
    return err + l1 + dc.scale(l2, gamma2)


def _offdiag_index(n: int) -> np.ndarray:
    """Index into ``concat(p_spa.ravel(), [0])`` laying (N, N-1) out as (N, N), zero diagonal."""
    idx = np.full((n, n), n * (n - 1), dtype=np.int64)
    for i in range(n):
        cols = [j for j in range(n) if j != i]
        idx[i, cols] = i * (n - 1) + np.arange(n - 1)
    return idx


def spread_offdiag(p: Tensor) -> Tensor:
    n = p.shape[0]
    padded = dc.concat([p.reshape(n * (n - 1)), Tensor(np.zeros(1))], axis=0)
    return dc.take(padded, _offdiag_index(n))


@dataclass
class EncoderOutput:
    nodes: Tensor  # (..., N, d) updated node embeddings
    graph: Tensor  # (..., d) readout
    recon: Tensor  # scalar
    pre_mlp: Tensor  # (..., N, d) attention aggregate before the MLP
    weights: Tensor  # (..., N, K, 2)
    spatial_members: list[list[int]] = field(default_factory=list)
    temporal_members: list[list[int]] = field(default_factory=list)


class HypergraphEncoder:
    """Trainable encoder for ``n_nodes`` intersections."""

    def __init__(self, n_nodes: int, config: HGConfig | None = None, rng=None, obs_dim: int = OBS_DIM):
        self.n = n_nodes
        self.config = cfg = config or HGConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        d, k, dh = cfg.d_embed, cfg.heads, cfg.head_dim
        u = dc.init_uniform
        self.w_e = u(rng, (obs_dim, d), obs_dim, "w_e")
        self.b_e = u(rng, (d,), obs_dim, "b_e")
        self.theta_spa = u(rng, (d, d), d, "theta_spa")
        self.theta_tem = u(rng, (d, d), d, "theta_tem")
        self.p_spa = dc.parameter(np.full((n_nodes, n_nodes - 1), cfg.coef_init), "p_spa")
        self.p_tem = dc.parameter(np.full((n_nodes, n_nodes), cfg.coef_init), "p_tem")
        self.q_lin = u(rng, (d, d), d, "q_lin")
        self.k_spa = u(rng, (d, d), d, "k_spa")
        self.k_tem = u(rng, (d, d), d, "k_tem")
        self.att_spa = u(rng, (k, dh, dh), dh, "att_spa")
        self.att_tem = u(rng, (k, dh, dh), dh, "att_tem")
        self.mlp_w1 = u(rng, (d, d), d, "mlp_w1")
        self.mlp_b1 = u(rng, (d,), d, "mlp_b1")
        self.mlp_w2 = u(rng, (d, d), d, "mlp_w2")
        self.mlp_b2 = u(rng, (d,), d, "mlp_b2")

    _NAMES = (
        "w_e", "b_e", "theta_spa", "theta_tem", "p_spa", "p_tem", "q_lin", "k_spa", "k_tem",
        "att_spa", "att_tem", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2",
    )

    def params(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in self._NAMES}

    def embed(self, obs) -> Tensor:
        return embed_observations(obs, self.w_e, self.b_e)

    def incidence(self):
        """Gated incidence matrices over [V^t, V^{t-1}] plus the effective coefficients."""
        cfg, n = self.config, self.n
        q_spa = effective(self.p_spa)
        q_tem = effective(self.p_tem)
        q_spa_full = spread_offdiag(q_spa) if n > 1 else Tensor(np.zeros((1, 1)))
        gate_spa = selection_mask(q_spa_full, cfg.zeta)
        gate_tem = selection_mask(q_tem, cfg.zeta)
        eye = np.eye(n)
        re_spa = dc.add(eye, dc.mul(q_spa_full, gate_spa.astype(float)))
        re_tem = dc.concat([Tensor(eye), dc.mul(q_tem, gate_tem.astype(float))], axis=1)
        return re_spa, re_tem, q_spa, q_spa_full, q_tem, gate_spa, gate_tem

    def encode(self, obs_t, obs_tm1) -> EncoderOutput:
        cfg = self.config
        h_t = self.embed(obs_t)
        h_tm1 = self.embed(obs_tm1)
        if h_t.shape != h_tm1.shape:
            raise dc.ShapeMismatch(f"{h_t.shape} vs {h_tm1.shape}")
        re_spa, re_tem, q_spa, q_spa_full, q_tem, gate_spa, gate_tem = self.incidence()

        c_spa = reconstruction_error(h_t, h_t, self.theta_spa, q_spa_full)
        c_tem = reconstruction_error(h_t, h_tm1, self.theta_tem, q_tem)
        recon = recon_loss(c_spa, c_tem, q_spa, q_tem, cfg.lam, cfg.gamma2)

        e_spa = hyperedge_embedding(re_spa, h_t)
        e_tem = hyperedge_embedding(re_tem, dc.concat([h_t, h_tm1], axis=-2))
        weights, key_s, key_t = attention_weights(
            h_t, e_spa, e_tem, self.q_lin, self.k_spa, self.k_tem, self.att_spa, self.att_tem, cfg.heads
        )
        pre = aggregate_heads(weights, key_s, key_t)
        nodes = node_mlp(pre, self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2)
        return EncoderOutput(
            nodes=nodes,
            graph=readout(nodes),
            recon=recon,
            pre_mlp=pre,
            weights=weights,
            spatial_members=[[int(j) for j in np.flatnonzero(r)] for r in gate_spa],
            temporal_members=[[int(j) for j in np.flatnonzero(r)] for r in gate_tem],
        )

    __call__ = encode
