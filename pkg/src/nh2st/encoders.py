"""Pathology encoder, gene encoder and prediction translator.

All three are two-layer perceptrons (affine, ReLU, affine) acting on row
batches.  The pathology encoder stands in for an image backbone: anything that
maps a patch feature vector to an N-vector behind ``mlp_forward`` can replace it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ParamTree, glorot_uniform, relu

MLP_LEAVES = ("W1", "b1", "W2", "b2")


@dataclass(frozen=True)
class EncoderDims:
    P: int
    n: int
    N: int
    H: int
    H_g: int

    def __post_init__(self):
        for name in ("P", "n", "N", "H", "H_g"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def layers(self) -> dict[str, tuple[int, int, int]]:
        # phi_t mirrors phi_g: n -> H_g -> N versus N -> H_g -> n
        return {
            "phi_p": (self.P, self.H, self.N),
            "phi_g": (self.n, self.H_g, self.N),
            "phi_t": (self.N, self.H_g, self.n),
        }


def init_mlp(rng: np.random.Generator, d_in: int, d_hidden: int, d_out: int) -> dict[str, np.ndarray]:
    return {
        "W1": glorot_uniform(rng, d_in, d_hidden),
        "b1": np.zeros((1, d_hidden)),
        "W2": glorot_uniform(rng, d_hidden, d_out),
        "b2": np.zeros((1, d_out)),
    }


def init_encoders(dims: EncoderDims, rng: np.random.Generator) -> ParamTree:
    tree = ParamTree()
    for name, (d_in, d_hidden, d_out) in dims.layers.items():
        tree.update(f"enc.{name}", init_mlp(rng, d_in, d_hidden, d_out))
    check_encoder_shapes(tree)
    return tree


def check_encoder_shapes(params) -> None:
    """Structural check that phi_g and phi_t are mirror images."""
    g_in, g_out = params["enc.phi_g.W1"].shape[0], params["enc.phi_g.W2"].shape[1]
    t_in, t_out = params["enc.phi_t.W1"].shape[0], params["enc.phi_t.W2"].shape[1]
    p_out = params["enc.phi_p.W2"].shape[1]
    if p_out != g_out:
        raise ValueError(f"phi_p outputs {p_out} features but phi_g outputs {g_out}")
    if (t_in, t_out) != (g_out, g_in):
        raise ValueError(f"phi_t must map {g_out}->{g_in}, got {t_in}->{t_out}")


def mlp_forward(w: dict[str, np.ndarray], x: np.ndarray) -> tuple[np.ndarray, tuple]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != w["W1"].shape[0]:
        raise ValueError(f"expected input width {w['W1'].shape[0]}, got {x.shape[-1]}")
    pre = x @ w["W1"] + w["b1"]
    hidden = relu(pre)
    out = hidden @ w["W2"] + w["b2"]
    return out, (x, pre, hidden)


def mlp_backward(w: dict[str, np.ndarray], cache: tuple, dout: np.ndarray):
    """Return (parameter grads, input grad) for a row batch."""
    x, pre, hidden = cache
    dhidden = dout @ w["W2"].T
    dpre = dhidden * (pre > 0)
    grads = {
        "W1": x.T @ dpre,
        "b1": dpre.sum(axis=0, keepdims=True),
        "W2": hidden.T @ dout,
        "b2": dout.sum(axis=0, keepdims=True),
    }
    return grads, dpre @ w["W1"].T


def _mlp(params, name: str) -> dict[str, np.ndarray]:
    return {leaf: params[f"enc.{name}.{leaf}"] for leaf in MLP_LEAVES}


def _apply(params, name: str, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    out, _ = mlp_forward(_mlp(params, name), x[None, :] if single else x)
    return out[0] if single else out


def encode_patch(params, patch) -> np.ndarray:
    """Patch features (P or B×P) to pathology embeddings (N or B×N)."""
    return _apply(params, "phi_p", patch)


def encode_genes(params, y) -> np.ndarray:
    """Expression vectors (n or B×n) to gene embeddings (N or B×N)."""
    return _apply(params, "phi_g", y)


def translate(params, h_p) -> np.ndarray:
    """Pathology embeddings (N or B×N) to predicted expression (n or B×n)."""
    return _apply(params, "phi_t", h_p)
