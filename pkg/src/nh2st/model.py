"""The dual-branch model: parameters, batched forward/backward, inference.

Parameter paths::

    enc.phi_p.{W1,b1,W2,b2}          pathology encoder, P -> H -> N
    enc.phi_g.{W1,b1,W2,b2}          gene encoder,      n -> H_g -> N
    enc.phi_t.{W1,b1,W2,b2}          translator,        N -> H_g -> n
    query.ca.{p2g,g2p}.{Wq,Wk,Wv}    spot-level cross-attention
    neighbor.ca.{p2g,g2p}.{Wq,Wk,Wv} neighbourhood-level cross-attention
    neighbor.hgnn_{p,g}.theta{i}     HGNN layer weights, one stack per modality

``p2g`` refines the pathology side with gene guidance, ``g2p`` the reverse.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attention, encoders, hypergraph
from .config import TrainConfig
from .contrastive import info_nce_with_grad
from .numerics import ParamTree, accumulate

PREDICT_PREFIXES = ("enc.phi_p.", "enc.phi_t.")


def init_params(cfg: TrainConfig, seed: int | None = None) -> ParamTree:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    dims = encoders.EncoderDims(P=cfg.P, n=cfg.n, N=cfg.N, H=cfg.H, H_g=cfg.H_g)
    params = encoders.init_encoders(dims, rng)
    for branch in ("query", "neighbor"):
        for direction in ("p2g", "g2p"):
            params.update(f"{branch}.ca.{direction}", attention.init_cross_attn(rng, cfg.token_dim))
    for side in ("p", "g"):
        params.update(f"neighbor.hgnn_{side}", hypergraph.init_hgnn(rng, cfg.N, cfg.L))
    return params


@dataclass(frozen=True)
class Batch:
    """B target spots and their neighbourhoods (node 0 is the target itself)."""

    patches: np.ndarray
    expr: np.ndarray
    node_patches: np.ndarray
    node_expr: np.ndarray

    @property
    def size(self) -> int:
        return self.patches.shape[0]


def make_batch(ds, indices, neighbors: np.ndarray) -> Batch:
    idx = np.asarray(indices, dtype=int)
    nodes = np.concatenate([idx[:, None], neighbors[idx]], axis=1)
    return Batch(
        patches=ds.patches[idx],
        expr=ds.expr[idx],
        node_patches=ds.patches[nodes],
        node_expr=ds.expr[nodes],
    )


@dataclass(frozen=True)
class LossTerms:
    ls: float
    ln: float
    mse: float
    total: float


@dataclass
class ForwardResult:
    terms: LossTerms
    pred: np.ndarray
    grads: ParamTree | None = None


def mse_loss(pred, label) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    if pred.shape != label.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {label.shape}")
    return float(np.mean((label - pred) ** 2))


def _leaves(params, prefix: str) -> dict[str, np.ndarray]:
    return params.subtree(prefix) if isinstance(params, ParamTree) else {
        k[len(prefix) + 1:]: v for k, v in params.items() if k.startswith(prefix + ".")
    }


def forward_batch(params: ParamTree, cfg: TrainConfig, batch: Batch, with_grad: bool = True) -> ForwardResult:
    """Total loss lambda1*L_s + lambda2*L_n + L_mse and, optionally, its gradient.

    With B = 1 both contrastive terms are defined as 0 and skipped.
    """
    B = batch.size
    phi_p = _leaves(params, "enc.phi_p")
    phi_g = _leaves(params, "enc.phi_g")
    phi_t = _leaves(params, "enc.phi_t")

    # query branch
    hp_s, c_hp = encoders.mlp_forward(phi_p, batch.patches)
    pred, c_t = encoders.mlp_forward(phi_t, hp_s)
    resid = pred - batch.expr
    mse = float(np.mean(resid**2))
    contrast = B >= 2
    ls = ln = 0.0
    if contrast:
        hg_s, c_hg = encoders.mlp_forward(phi_g, batch.expr)
        q_p2g = _leaves(params, "query.ca.p2g")
        q_g2p = _leaves(params, "query.ca.g2p")
        zp_s, c_qp = attention.cross_attend_forward(q_p2g, hp_s, hg_s, cfg.T)
        zg_s, c_qg = attention.cross_attend_forward(q_g2p, hg_s, hp_s, cfg.T)
        ls, dzp_s, dzg_s = info_nce_with_grad(zp_s, zg_s, cfg.tau_temp)

        # neighbour branch
        V = batch.node_patches.shape[1]
        hp_nodes_flat, c_np = encoders.mlp_forward(phi_p, batch.node_patches.reshape(B * V, -1))
        hg_nodes_flat, c_ng = encoders.mlp_forward(phi_g, batch.node_expr.reshape(B * V, -1))
        hp_nodes = hp_nodes_flat.reshape(B, V, -1)
        hg_nodes = hg_nodes_flat.reshape(B, V, -1)
        H_p = hypergraph.build_hyperedges(hp_nodes, cfg.tau_deg)
        H_g = hypergraph.build_hyperedges(hg_nodes, cfg.tau_deg)
        w_hp = _leaves(params, "neighbor.hgnn_p")
        w_hg = _leaves(params, "neighbor.hgnn_g")
        hp_n, c_gp = hypergraph.hgnn_forward_cached(w_hp, H_p, hp_nodes)
        hg_n, c_gg = hypergraph.hgnn_forward_cached(w_hg, H_g, hg_nodes)
        n_p2g = _leaves(params, "neighbor.ca.p2g")
        n_g2p = _leaves(params, "neighbor.ca.g2p")
        zp_n, c_np2g = attention.cross_attend_forward(n_p2g, hp_n, hg_n, cfg.T)
        zg_n, c_ng2p = attention.cross_attend_forward(n_g2p, hg_n, hp_n, cfg.T)
        ln, dzp_n, dzg_n = info_nce_with_grad(zp_n, zg_n, cfg.tau_temp)

    total = cfg.lambda1 * ls + cfg.lambda2 * ln + mse
    terms = LossTerms(ls=ls, ln=ln, mse=mse, total=total)
    if not with_grad:
        return ForwardResult(terms, pred)

    grads = ParamTree()
    dpred = 2.0 * resid / resid.size
    g, dhp_s = encoders.mlp_backward(phi_t, c_t, dpred)
    accumulate(grads, "enc.phi_t", g)
    dhg_s = np.zeros_like(hp_s)
    if contrast:
        l1, l2 = cfg.lambda1, cfg.lambda2
        g, dt, dgd = attention.cross_attend_backward(q_p2g, c_qp, l1 * dzp_s)
        accumulate(grads, "query.ca.p2g", g)
        dhp_s = dhp_s + dt
        dhg_s = dhg_s + dgd
        g, dt, dgd = attention.cross_attend_backward(q_g2p, c_qg, l1 * dzg_s)
        accumulate(grads, "query.ca.g2p", g)
        dhg_s = dhg_s + dt
        dhp_s = dhp_s + dgd

        g, dt, dgd = attention.cross_attend_backward(n_p2g, c_np2g, l2 * dzp_n)
        accumulate(grads, "neighbor.ca.p2g", g)
        dhp_n, dhg_n = dt, dgd
        g, dt, dgd = attention.cross_attend_backward(n_g2p, c_ng2p, l2 * dzg_n)
        accumulate(grads, "neighbor.ca.g2p", g)
        dhg_n = dhg_n + dt
        dhp_n = dhp_n + dgd
        g, dhp_nodes = hypergraph.hgnn_backward(w_hp, c_gp, dhp_n)
        accumulate(grads, "neighbor.hgnn_p", g)
        g, dhg_nodes = hypergraph.hgnn_backward(w_hg, c_gg, dhg_n)
        accumulate(grads, "neighbor.hgnn_g", g)

        g, _ = encoders.mlp_backward(phi_p, c_np, dhp_nodes.reshape(B * V, -1))
        accumulate(grads, "enc.phi_p", g)
        g, _ = encoders.mlp_backward(phi_g, c_ng, dhg_nodes.reshape(B * V, -1))
        accumulate(grads, "enc.phi_g", g)
        g, _ = encoders.mlp_backward(phi_g, c_hg, dhg_s)
        accumulate(grads, "enc.phi_g", g)
    g, _ = encoders.mlp_backward(phi_p, c_hp, dhp_s)
    accumulate(grads, "enc.phi_p", g)

    # leaves that received no gradient (B = 1) get explicit zeros
    for path in params:
        if path not in grads:
            grads[path] = np.zeros_like(params[path])
    return ForwardResult(terms, pred, grads)


def predict(params, cfg: TrainConfig | None, patch) -> np.ndarray:
    """Expression from patch features alone: translator applied to the pathology embedding.

    Reads only ``enc.phi_p`` and ``enc.phi_t``; ``patch`` may be a P-vector or B×P.
    """
    used = {k: v for k, v in params.items() if k.startswith(PREDICT_PREFIXES)}
    patch = np.asarray(patch, dtype=np.float64)
    if cfg is not None and patch.shape[-1] != cfg.P:
        raise ValueError(f"patch has {patch.shape[-1]} features, model expects {cfg.P}")
    return encoders.translate(used, encoders.encode_patch(used, patch))
