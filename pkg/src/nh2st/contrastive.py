"""InfoNCE over a batch of paired pathology/gene embeddings.

Pathology rows are the anchors; for anchor i the positive is gene row i and
the negatives are the other B-1 gene rows.  Similarity is cosine, so the loss
does not depend on row norms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import cosine_matrix, cosine_matrix_backward


@dataclass(frozen=True)
class ContrastBatch:
    zp: np.ndarray
    zg: np.ndarray
    tau_temp: float = 0.05

    def __post_init__(self):
        zp = np.atleast_2d(np.asarray(self.zp, dtype=np.float64))
        zg = np.atleast_2d(np.asarray(self.zg, dtype=np.float64))
        if zp.shape != zg.shape:
            raise ValueError(f"zp {zp.shape} and zg {zg.shape} must match")
        if zp.shape[0] < 1:
            raise ValueError("empty batch")
        if not self.tau_temp > 0:
            raise ValueError(f"temperature must be positive, got {self.tau_temp}")
        object.__setattr__(self, "zp", zp)
        object.__setattr__(self, "zg", zg)


def info_nce_from_similarity(sim: np.ndarray, tau_temp: float) -> tuple[float, np.ndarray]:
    """Loss from a B×B similarity matrix (row i = anchor i) and its gradient."""
    B = sim.shape[0]
    logits = sim / tau_temp
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_prob = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = 0.0 - np.trace(log_prob) / B
    dsim = (np.exp(log_prob) - np.eye(B)) / (B * tau_temp)
    return float(loss), dsim


def info_nce_with_grad(zp: np.ndarray, zg: np.ndarray, tau_temp: float):
    """Return (loss, dloss/dzp, dloss/dzg)."""
    batch = ContrastBatch(zp, zg, tau_temp)
    sim, cache = cosine_matrix(batch.zp, batch.zg)
    loss, dsim = info_nce_from_similarity(sim, tau_temp)
    dzp, dzg = cosine_matrix_backward(dsim, cache)
    return loss, dzp, dzg


def info_nce(batch: ContrastBatch) -> float:
    return info_nce_with_grad(batch.zp, batch.zg, batch.tau_temp)[0]
