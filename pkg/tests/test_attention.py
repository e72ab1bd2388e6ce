import math

import numpy as np
import pytest

from nh2st.attention import (
    attention_weights,
    cross_attend,
    cross_attend_backward,
    cross_attend_forward,
    init_cross_attn,
    tokenize,
)
from nh2st.numerics import ParamTree, grad_check, softmax


class TestTokenize:
    def test_layout(self):
        np.testing.assert_array_equal(tokenize([1, 2, 3, 4], 2), [[1, 2], [3, 4]])

    def test_single_token(self, rng):
        h = rng.standard_normal(6)
        np.testing.assert_array_equal(tokenize(h, 1), h[None, :])

    def test_round_trip(self, rng):
        h = rng.standard_normal(24)
        for T in (1, 2, 3, 4, 6, 8, 12, 24):
            np.testing.assert_array_equal(tokenize(h, T).ravel(), h)

    def test_indivisible(self):
        with pytest.raises(ValueError):
            tokenize(np.ones(6), 4)


def hand_attend(w, target, guide, T):
    """Scalar-loop evaluation of tokenized single-head attention."""
    d = len(target) // T
    tt = [target[t * d:(t + 1) * d] for t in range(T)]
    gt = [guide[t * d:(t + 1) * d] for t in range(T)]

    def proj(x, W):
        return [sum(x[i] * W[i][j] for i in range(len(x))) for j in range(len(W[0]))]

    Q = [proj(x, w["Wq"]) for x in tt]
    K = [proj(x, w["Wk"]) for x in gt]
    V = [proj(x, w["Wv"]) for x in gt]
    dk = len(K[0])
    out = []
    for a in range(T):
        logits = [sum(Q[a][j] * K[b][j] for j in range(dk)) / math.sqrt(dk) for b in range(T)]
        m = max(logits)
        e = [math.exp(x - m) for x in logits]
        s = sum(e)
        weights = [x / s for x in e]
        out += [sum(weights[b] * V[b][j] for b in range(T)) for j in range(len(V[0]))]
    return out


class TestCrossAttend:
    def test_single_token_ignores_target(self, rng):
        w = init_cross_attn(rng, 6)
        guide = rng.standard_normal(6)
        for _ in range(3):
            z = cross_attend(w, rng.standard_normal(6), guide, T=1)
            np.testing.assert_allclose(z, guide @ w["Wv"], atol=1e-14)

    def test_zero_query_key_gives_mean_of_values(self, rng):
        w = init_cross_attn(rng, 3)
        w["Wq"] = np.zeros((3, 3))
        w["Wk"] = np.zeros((3, 3))
        target, guide = rng.standard_normal(12), rng.standard_normal(12)
        V = tokenize(guide, 4) @ w["Wv"]
        expected = np.tile(V.mean(axis=0), 4)
        np.testing.assert_allclose(cross_attend(w, target, guide, 4), expected, atol=1e-14)

    def test_two_tokens_against_hand_evaluation(self, rng):
        w = init_cross_attn(rng, 3)
        target, guide = rng.standard_normal(6), rng.standard_normal(6)
        ref = hand_attend({k: v.tolist() for k, v in w.items()}, target.tolist(), guide.tolist(), 2)
        np.testing.assert_allclose(cross_attend(w, target, guide, 2), ref, atol=1e-12)

    def test_rows_are_distributions(self, rng):
        w = init_cross_attn(rng, 4)
        A = attention_weights(w, rng.standard_normal((5, 16)), rng.standard_normal((5, 16)), 4)
        assert A.shape == (5, 4, 4)
        np.testing.assert_allclose(A.sum(axis=-1), 1.0, atol=1e-12)

    def test_logit_shift_invariance(self, rng):
        w = init_cross_attn(rng, 4)
        target, guide = rng.standard_normal(16), rng.standard_normal(16)
        q = tokenize(target, 4) @ w["Wq"]
        k = tokenize(guide, 4) @ w["Wk"]
        v = tokenize(guide, 4) @ w["Wv"]
        logits = q @ k.T / 2.0
        base = cross_attend(w, target, guide, 4)
        for c in (rng.uniform(-30, 30, (4, 1)), np.full((4, 1), 250.0)):
            shifted = softmax(logits + c, axis=-1) @ v
            np.testing.assert_allclose(shifted.ravel(), base, atol=1e-12)

    def test_shape_mismatch(self, rng):
        w = init_cross_attn(rng, 2)
        with pytest.raises(ValueError):
            cross_attend(w, np.ones(4), np.ones(6), 2)
        with pytest.raises(ValueError):
            cross_attend(w, np.ones(6), np.ones(6), 2)

    def test_grad_check(self, rng):
        w = init_cross_attn(rng, 3)
        tree = ParamTree({**w, "target": rng.standard_normal((2, 12)), "guide": rng.standard_normal((2, 12))})

        def f(p):
            ww = {k: p[k] for k in ("Wq", "Wk", "Wv")}
            z, cache = cross_attend_forward(ww, p["target"], p["guide"], 4)
            g, dt, dg = cross_attend_backward(ww, cache, 2 * z)
            return float((z**2).sum()), {**g, "target": dt, "guide": dg}

        assert grad_check(f, tree) < 1e-4
