"""Single-head cross-attention between two N-vectors.

An N-vector is split into T tokens of width N/T so that the attention matrix
is T×T.  With one token per modality the softmax is a 1×1 matrix equal to 1 and
the query would have no effect on the output.
"""

from __future__ import annotations

import numpy as np

from .numerics import glorot_uniform, softmax, softmax_backward

CA_LEAVES = ("Wq", "Wk", "Wv")


def tokenize(h, T: int) -> np.ndarray:
    """Reshape an N-vector (or B×N batch) into T rows of N/T entries."""
    h = np.asarray(h, dtype=np.float64)
    N = h.shape[-1]
    if T <= 0 or N % T:
        raise ValueError(f"token count {T} does not divide feature width {N}")
    return h.reshape(*h.shape[:-1], T, N // T)


def init_cross_attn(rng: np.random.Generator, d: int) -> dict[str, np.ndarray]:
    return {name: glorot_uniform(rng, d, d) for name in CA_LEAVES}


def cross_attend_forward(w: dict[str, np.ndarray], target: np.ndarray, guide: np.ndarray, T: int):
    """Refine ``target`` (B×N) using ``guide`` (B×N).  Returns (B×N output, cache)."""
    if target.shape != guide.shape:
        raise ValueError(f"target {target.shape} and guide {guide.shape} differ")
    xt = tokenize(target, T)
    xg = tokenize(guide, T)
    d = xt.shape[-1]
    for name in CA_LEAVES:
        if w[name].shape[0] != d:
            raise ValueError(f"{name} expects token width {w[name].shape[0]}, got {d}")
    if w["Wq"].shape[1] != w["Wk"].shape[1]:
        raise ValueError("Wq and Wk must project to the same key width")
    if w["Wv"].shape[1] != d:
        raise ValueError("Wv must keep the token width so the output stays N-dimensional")
    d_k = w["Wk"].shape[1]
    scale = 1.0 / np.sqrt(d_k)
    q = xt @ w["Wq"]
    k = xg @ w["Wk"]
    v = xg @ w["Wv"]
    attn = softmax(q @ np.swapaxes(k, -1, -2) * scale, axis=-1)
    out = attn @ v
    return out.reshape(target.shape), (xt, xg, q, k, v, attn, scale)


def cross_attend_backward(w: dict[str, np.ndarray], cache: tuple, dz: np.ndarray):
    """Return (parameter grads, d target, d guide)."""
    xt, xg, q, k, v, attn, scale = cache
    dout = dz.reshape(attn.shape[:-1] + (v.shape[-1],))
    dattn = dout @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(attn, -1, -2) @ dout
    dlogits = softmax_backward(attn, dattn) * scale
    dq = dlogits @ k
    dk = np.swapaxes(dlogits, -1, -2) @ q

    def wgrad(x, dy):
        return (x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1]))

    grads = {"Wq": wgrad(xt, dq), "Wk": wgrad(xg, dk), "Wv": wgrad(xg, dv)}
    dtarget = dq @ w["Wq"].T
    dguide = dk @ w["Wk"].T + dv @ w["Wv"].T
    flat = dz.shape
    return grads, dtarget.reshape(flat), dguide.reshape(flat)


def cross_attend(w: dict[str, np.ndarray], target, guide, T: int) -> np.ndarray:
    """Refined ``target`` given ``guide``; accepts single N-vectors or B×N batches."""
    target = np.asarray(target, dtype=np.float64)
    guide = np.asarray(guide, dtype=np.float64)
    single = target.ndim == 1
    if single:
        target, guide = target[None, :], guide[None, :]
    out, _ = cross_attend_forward(w, target, guide, T)
    return out[0] if single else out


def attention_weights(w: dict[str, np.ndarray], target, guide, T: int) -> np.ndarray:
    """The T×T (or B×T×T) row-stochastic attention matrix."""
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    guide = np.atleast_2d(np.asarray(guide, dtype=np.float64))
    return cross_attend_forward(w, target, guide, T)[1][5]
