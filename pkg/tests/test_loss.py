import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mango_attack.loss import (
    AdversarialLoss,
    LossBreakdown,
    LossWeights,
    composite_gradient,
    composite_loss,
    fluency_loss,
    inverse_frequency_weights,
    margin_loss,
    quantization_gap,
    similarity_loss,
)
from mango_attack.models import ToyClassifier, ToyReferenceModel
from mango_attack.relaxation import (
    RelaxedSequence,
    TokenSequence,
    initialize_relaxed,
    quantize,
    quantize_all_argmax,
)

V, N = 10, 5


class UniformReference:
    vocab_size = 4

    def next_token_distributions(self, P):
        return np.full((P.shape[0], self.vocab_size), 1.0 / self.vocab_size)


def _quantized(x, V):
    seq = initialize_relaxed(x, 0.0, V)
    for i, k in enumerate(x):
        seq = quantize(seq, i, k)
    return seq


@pytest.fixture
def setup(rng):
    m, g = ToyClassifier(V, seed=5), ToyReferenceModel(V, seed=6)
    x = TokenSequence(rng.integers(0, V, N))
    y = int(np.argmax(m.logits(x.one_hot(V))))
    return m, g, x, y


def test_margin_loss_examples():
    assert margin_loss([2, 1], 0, 5) == 6
    assert margin_loss([-4, 2], 0, 5) == 0
    assert margin_loss([0, 0, 0], 1, 0) == 0
    with pytest.raises(IndexError):
        margin_loss([1, 2], 2, 1)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=6), st.floats(0, 10), st.floats(-100, 100),
       st.data())
def test_margin_properties(logits, kappa, shift, data):
    y = data.draw(st.integers(0, len(logits) - 1))
    val = margin_loss(logits, y, kappa)
    assert val >= 0
    others = max(l for k, l in enumerate(logits) if k != y)
    assert (val == 0) == (logits[y] - others + kappa <= 0)
    assert margin_loss(np.add(logits, shift), y, kappa) == pytest.approx(val, abs=1e-9)


def test_fluency_uniform_reference():
    seq = _quantized(TokenSequence([0, 3, 1]), 4)
    assert fluency_loss(UniformReference(), seq) == pytest.approx(-0.75, abs=1e-15)


def test_fluency_matches_double_loop(setup, rng):
    _, g, _, _ = setup
    seq = RelaxedSequence(rng.standard_normal((N, V)))
    P = seq.probability_matrix()
    D = g.next_token_distributions(P)
    brute = 0.0
    for i in range(N):
        for j in range(V):
            brute -= P[i, j] * D[i, j]
    assert fluency_loss(g, seq) == pytest.approx(brute, abs=1e-12)
    assert -N <= fluency_loss(g, seq) <= 0


def test_similarity_identity_and_oracle(setup, rng):
    _, g, x, _ = setup
    w = rng.uniform(0.5, 2, N)
    assert similarity_loss(g, _quantized(x, V), x, w) == pytest.approx(-w.sum(), abs=1e-12)
    assert similarity_loss(g, _quantized(x, V), x) == pytest.approx(-N, abs=1e-12)
    seq = RelaxedSequence(rng.standard_normal((N, V)))
    v = g.contextual_embeddings(x.one_hot(V))
    vp = g.contextual_embeddings(seq.probability_matrix())
    brute = 0.0
    for i in range(N):
        brute -= w[i] * max(float(v[i] @ vp[j]) for j in range(N))
    assert similarity_loss(g, seq, x, w) == pytest.approx(brute, abs=1e-12)
    with pytest.raises(ValueError):
        similarity_loss(g, RelaxedSequence(np.zeros((N + 1, V))), x)


def test_inverse_frequency_weights():
    x = TokenSequence([0, 1, 1])
    w = inverse_frequency_weights(x, [1.0, 2.0])
    np.testing.assert_allclose(w, np.array([1.0, 0.5, 0.5]) * 3 / 2.0)
    assert w.sum() == pytest.approx(3)
    np.testing.assert_array_equal(inverse_frequency_weights(x), np.ones(3))


def test_composite_defaults_and_weight_collapse(setup, rng):
    m, g, x, y = setup
    assert LossWeights() == LossWeights(lambda_f=1.0, lambda_s=20.0, kappa=5.0)
    seq = RelaxedSequence(rng.standard_normal((N, V)))
    bd = composite_loss(m, g, seq, x, y, LossWeights(0.0, 0.0, 5.0))
    assert bd.total == bd.margin
    bd = composite_loss(m, g, seq, x, y)
    assert bd.total == pytest.approx(bd.margin + bd.fluency + 20 * bd.similarity, abs=1e-12)
    with pytest.raises(ValueError):
        LossWeights(lambda_s=-1.0)


def test_composite_affine_in_weights(setup, rng):
    m, g, x, y = setup
    seq = RelaxedSequence(rng.standard_normal((N, V)))
    pts = [(0.5, 3.0), (2.0, 11.0), (4.0, 1.0)]
    totals = [composite_loss(m, g, seq, x, y, LossWeights(lf, ls, 5.0)).total for lf, ls in pts]
    A = np.array([[1.0, lf, ls] for lf, ls in pts])
    coef = np.linalg.solve(A, totals)
    bd = composite_loss(m, g, seq, x, y)
    np.testing.assert_allclose(coef, [bd.margin, bd.fluency, bd.similarity], atol=1e-10)
    # fourth point checks the fit residual
    pred = coef @ [1.0, 7.0, 9.0]
    assert abs(pred - composite_loss(m, g, seq, x, y, LossWeights(7.0, 9.0, 5.0)).total) < 1e-10


def test_relaxed_path_equals_token_path(setup):
    m, g, x, y = setup
    adv = TokenSequence([(k + 3) % V for k in x])
    bd = composite_loss(m, g, _quantized(adv, V), x, y)
    P = adv.one_hot(V)
    assert bd.margin == pytest.approx(margin_loss(m.logits(P), y, 5.0), abs=1e-12)
    assert bd.fluency == pytest.approx(fluency_loss(g, P), abs=1e-12)
    assert bd.similarity == pytest.approx(similarity_loss(g, P, x), abs=1e-12)


def test_gradient_shapes_and_frozen_rows(setup, rng):
    m, g, x, y = setup
    seq = quantize(RelaxedSequence(rng.standard_normal((N, V))), 0, 2)
    gt, gp = composite_gradient(m, g, seq, x, y)
    assert gt.shape == gp.shape == (N, V)
    assert np.all(gt[0] == 0.0)
    np.testing.assert_allclose(gt.sum(axis=1), 0.0, atol=1e-12)  # softmax shift invariance


def test_quantization_gap(setup, rng):
    m, g, x, y = setup
    assert quantization_gap(m, g, _quantized(x, V), x, y) == 0.0
    flat = RelaxedSequence(np.zeros((N, V)))
    brute = (composite_loss(m, g, quantize_all_argmax(flat), x, y).total
             - composite_loss(m, g, flat, x, y).total)
    assert quantization_gap(m, g, flat, x, y) == brute
    # all-zero logits tie: argmax picks token 0 everywhere
    assert quantize_all_argmax(flat).frozen_ids == [0] * N


def test_gap_shrinks_with_init_scale(setup):
    m, g, x, y = setup
    gaps = [abs(quantization_gap(m, g, initialize_relaxed(x, C, V), x, y)) for C in (2.0, 10.0, 50.0)]
    assert gaps[0] > gaps[1] > gaps[2]


def test_breakdown_json_round_trip():
    bd = LossBreakdown(1.0, -0.1234567890123, -3.0, -61.1234567890123)
    d = json.loads(json.dumps(bd.to_dict()))
    assert set(d) == {"margin", "fluency", "similarity", "total"}
    assert LossBreakdown.from_dict(d) == bd


def test_loss_rejects_length_mismatch(setup):
    m, g, x, y = setup
    loss = AdversarialLoss(m, g, x, y)
    with pytest.raises(ValueError):
        loss.breakdown(RelaxedSequence(np.zeros((N + 1, V))))
