"""Similarity hyperedges over a spot neighbourhood and HGNN propagation.

A neighbourhood has V = K+1 nodes (the target spot first, then its K spatial
neighbours).  Hyperedge e_j is seeded at node j and joins it with the
tau_deg-1 nodes most cosine-similar to it.  The incidence matrix is rebuilt on
every forward pass from the encoder outputs and is treated as a constant by
the backward pass.

Functions accept a single graph (V×d) or a stack of graphs (B×V×d).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import cosine_matrix, glorot_uniform


@dataclass(frozen=True)
class HyperGraph:
    X: np.ndarray
    H: np.ndarray

    @property
    def dv(self) -> np.ndarray:
        return self.H.sum(axis=-1)

    @property
    def de(self) -> np.ndarray:
        return self.H.sum(axis=-2)

    @classmethod
    def from_features(cls, X, tau_deg: int) -> HyperGraph:
        X = np.asarray(X, dtype=np.float64)
        return cls(X, build_hyperedges(X, tau_deg))


def build_hyperedges(X, tau_deg: int) -> np.ndarray:
    """Binary incidence matrix H with H[..., v, e] = 1 iff node v is in hyperedge e."""
    X = np.asarray(X, dtype=np.float64)
    V = X.shape[-2]
    if not 1 <= tau_deg <= V:
        raise ValueError(f"hyperedge degree {tau_deg} must lie in [1, {V}]")
    if not np.all(np.isfinite(X)):
        raise ValueError("node features must be finite")
    sim, _ = cosine_matrix(X, X)
    # seed sorts first; stable sort breaks similarity ties by ascending index
    key = -sim
    diag = np.arange(V)
    key[..., diag, diag] = -np.inf
    order = np.argsort(key, axis=-1, kind="stable")[..., :tau_deg]
    members = np.zeros(X.shape[:-2] + (V, V))
    np.put_along_axis(members, order, 1.0, axis=-1)
    # members[..., j, v] marks v in e_j; transpose to node x edge layout
    return np.swapaxes(members, -1, -2)


def propagation_matrix(H: np.ndarray) -> np.ndarray:
    """Dv^-1/2 H De^-1 H^T Dv^-1/2 with unit hyperedge weights."""
    dv = H.sum(axis=-1)
    de = H.sum(axis=-2)
    if np.any(dv <= 0) or np.any(de <= 0):
        raise ValueError("every node and hyperedge needs positive degree")
    inv_sqrt_dv = 1.0 / np.sqrt(dv)
    scaled = H * inv_sqrt_dv[..., :, None]
    return (scaled / de[..., None, :]) @ np.swapaxes(scaled, -1, -2)


def hgnn_layer_forward(G: np.ndarray, X: np.ndarray, theta: np.ndarray, last: bool):
    mixed = G @ X
    pre = mixed @ theta
    out = pre if last else np.maximum(pre, 0.0)
    return out, (G, mixed, pre, last)


def hgnn_layer_backward(theta: np.ndarray, cache: tuple, dout: np.ndarray):
    G, mixed, pre, last = cache
    dpre = dout if last else dout * (pre > 0)
    dtheta = mixed.reshape(-1, mixed.shape[-1]).T @ dpre.reshape(-1, dpre.shape[-1])
    # G is symmetric
    dX = G @ (dpre @ theta.T)
    return dtheta, dX


def hgnn_layer(H, X, theta, last: bool = False) -> np.ndarray:
    return hgnn_layer_forward(propagation_matrix(np.asarray(H, dtype=np.float64)),
                              np.asarray(X, dtype=np.float64), np.asarray(theta, dtype=np.float64), last)[0]


def init_hgnn(rng: np.random.Generator, N: int, L: int) -> dict[str, np.ndarray]:
    if L < 1:
        raise ValueError("HGNN needs at least one layer")
    return {f"theta{i}": glorot_uniform(rng, N, N) for i in range(L)}


def _thetas(w: dict[str, np.ndarray]) -> list[np.ndarray]:
    L = len(w)
    return [w[f"theta{i}"] for i in range(L)]


def hgnn_forward_cached(w: dict[str, np.ndarray], H: np.ndarray, X: np.ndarray):
    """L propagation layers then a mean over nodes.  Returns (pooled, cache)."""
    thetas = _thetas(w)
    G = propagation_matrix(H)
    caches = []
    h = X
    for i, theta in enumerate(thetas):
        if h.shape[-1] != theta.shape[0]:
            raise ValueError(f"layer {i} expects width {theta.shape[0]}, got {h.shape[-1]}")
        h, c = hgnn_layer_forward(G, h, theta, last=i == len(thetas) - 1)
        caches.append(c)
    pooled = h.mean(axis=-2)
    return pooled, (caches, h.shape[-2])


def hgnn_backward(w: dict[str, np.ndarray], cache: tuple, dpooled: np.ndarray):
    """Return (theta grads, dX)."""
    caches, V = cache
    thetas = _thetas(w)
    dh = np.repeat(dpooled[..., None, :] / V, V, axis=-2)
    grads = {}
    for i in reversed(range(len(thetas))):
        grads[f"theta{i}"], dh = hgnn_layer_backward(thetas[i], caches[i], dh)
    return grads, dh


def hgnn_forward(w: dict[str, np.ndarray], H, X) -> np.ndarray:
    return hgnn_forward_cached(w, np.asarray(H, dtype=np.float64), np.asarray(X, dtype=np.float64))[0]
