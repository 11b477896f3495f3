"""Composite adversarial loss: margin + lambda_f * fluency + lambda_s * similarity."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ._kernels import K
from .relaxation import RelaxedSequence, TokenSequence, quantize_all_argmax


@dataclass(frozen=True)
class LossWeights:
    lambda_f: float = 1.0
    lambda_s: float = 20.0
    kappa: float = 5.0

    def __post_init__(self):
        for name in ("lambda_f", "lambda_s", "kappa"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")


@dataclass(frozen=True)
class LossBreakdown:
    margin: float
    fluency: float
    similarity: float
    total: float

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: float(d[k]) for k in ("margin", "fluency", "similarity", "total")})


def _as_matrix(seq_or_p):
    if isinstance(seq_or_p, RelaxedSequence):
        return seq_or_p.probability_matrix()
    return np.asarray(seq_or_p, dtype=np.float64)


def margin_loss(logits, y, kappa):
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[0] < 2:
        raise ValueError("margin loss needs at least two labels")
    if not 0 <= y < logits.shape[0]:
        raise IndexError(f"label {y} out of range")
    others = np.delete(logits, y)
    return max(float(logits[y] - others.max() + kappa), 0.0)


def margin_loss_grad(logits, y, kappa):
    """Subgradient w.r.t. logits; the runner-up is the smallest index among ties."""
    logits = np.asarray(logits, dtype=np.float64)
    g = np.zeros_like(logits)
    if margin_loss(logits, y, kappa) > 0.0:
        masked = logits.copy()
        masked[y] = -np.inf
        g[y] = 1.0
        g[int(np.argmax(masked))] = -1.0
    return g


def fluency_loss(g, seq) -> float:
    """-sum_i sum_j pi_ij * g(pi_<i)_j  (expected probability, not log-probability)."""
    P = _as_matrix(seq)
    D = g.next_token_distributions(P)
    return -float(np.sum(P * D))


def fluency_grad(g, P):
    D = g.next_token_distributions(P)
    return -D + g.next_token_vjp(P, -P)


def inverse_frequency_weights(x: TokenSequence, frequencies=None):
    """w_i proportional to 1/freq(x_i), normalised to sum to n."""
    n = len(x)
    if frequencies is None:
        return np.ones(n)
    inv = 1.0 / np.asarray(frequencies, dtype=np.float64)[list(x.ids)]
    return inv * (n / inv.sum())


def similarity_loss(g, seq_adv, x: TokenSequence, weights=None) -> float:
    """-sum_i w_i max_j <v_i, v'_j> with unit-norm contextual embeddings."""
    P = _as_matrix(seq_adv)
    if P.shape[0] != len(x):
        raise ValueError(f"length mismatch: adversarial n={P.shape[0]}, original n={len(x)}")
    w = np.ones(len(x)) if weights is None else np.asarray(weights, dtype=np.float64)
    v = g.contextual_embeddings(x.one_hot(g.vocab_size))
    vp = g.contextual_embeddings(P)
    best, _ = K.greedy_match(v, vp)
    return -float(np.dot(w, best))


class AdversarialLoss:
    """The loss context of one attack instance: models, original x, label y, weights."""

    def __init__(self, m, g, x: TokenSequence, y: int, weights: LossWeights = LossWeights(),
                 token_weights=None):
        self.m = m
        self.g = g
        self.x = x
        self.y = int(y)
        self.weights = weights
        x.validate(m.vocab_size)
        if m.vocab_size != g.vocab_size:
            raise ValueError("classifier and reference model disagree on |V|")
        if not 0 <= self.y < m.num_labels:
            raise IndexError(f"label {y} out of range for {m.num_labels} labels")
        self.token_weights = (np.ones(len(x)) if token_weights is None
                              else np.asarray(token_weights, dtype=np.float64))
        if np.any(self.token_weights <= 0):
            raise ValueError("token weights must be positive")
        self.v_orig = g.contextual_embeddings(x.one_hot(g.vocab_size))
        self.evaluations = 0

    def _check(self, P):
        if P.shape[0] != len(self.x):
            raise ValueError(f"length mismatch: adversarial n={P.shape[0]}, original n={len(self.x)}")

    def _combine(self, margin, fluency, similarity):
        w = self.weights
        total = margin + w.lambda_f * fluency + w.lambda_s * similarity
        return LossBreakdown(margin, fluency, similarity, total)

    def breakdown(self, seq) -> LossBreakdown:
        P = _as_matrix(seq)
        self._check(P)
        self.evaluations += 1
        margin = margin_loss(self.m.logits(P), self.y, self.weights.kappa)
        fluency = -float(np.sum(P * self.g.next_token_distributions(P)))
        best, _ = K.greedy_match(self.v_orig, self.g.contextual_embeddings(P))
        similarity = -float(np.dot(self.token_weights, best))
        return self._combine(margin, fluency, similarity)

    def total(self, seq) -> float:
        return self.breakdown(seq).total

    def value_and_grad_p(self, seq):
        """Breakdown and d(total)/dP for every row (frozen rows included)."""
        P = _as_matrix(seq)
        self._check(P)
        self.evaluations += 1
        w = self.weights
        logits = self.m.logits(P)
        margin = margin_loss(logits, self.y, w.kappa)
        grad = self.m.logits_vjp(P, margin_loss_grad(logits, self.y, w.kappa))

        D = self.g.next_token_distributions(P)
        fluency = -float(np.sum(P * D))
        if w.lambda_f:
            grad += w.lambda_f * (-D + self.g.next_token_vjp(P, -P))

        vp = self.g.contextual_embeddings(P)
        best, idx = K.greedy_match(self.v_orig, vp)
        similarity = -float(np.dot(self.token_weights, best))
        if w.lambda_s:
            dvp = np.zeros_like(vp)
            np.add.at(dvp, idx, -self.token_weights[:, None] * self.v_orig)
            grad += w.lambda_s * self.g.contextual_vjp(P, dvp)
        return self._combine(margin, fluency, similarity), grad

    def value_and_grad(self, seq: RelaxedSequence):
        """Breakdown, d/dtheta (frozen rows zero) and d/dP (n x |V|)."""
        bd, grad_p = self.value_and_grad_p(seq)
        return bd, seq.theta_gradient(grad_p), grad_p

    def term_value_and_grad(self, seq: RelaxedSequence, term: str):
        """(value, d/dtheta) of one unweighted term: margin, fluency, similarity or total."""
        P = seq.probability_matrix()
        if term == "total":
            bd, grad = self.value_and_grad_p(P)
            return bd.total, seq.theta_gradient(grad)
        if term == "margin":
            logits = self.m.logits(P)
            value = margin_loss(logits, self.y, self.weights.kappa)
            grad = self.m.logits_vjp(P, margin_loss_grad(logits, self.y, self.weights.kappa))
        elif term == "fluency":
            value = fluency_loss(self.g, P)
            grad = fluency_grad(self.g, P)
        elif term == "similarity":
            vp = self.g.contextual_embeddings(P)
            best, idx = K.greedy_match(self.v_orig, vp)
            value = -float(np.dot(self.token_weights, best))
            dvp = np.zeros_like(vp)
            np.add.at(dvp, idx, -self.token_weights[:, None] * self.v_orig)
            grad = self.g.contextual_vjp(P, dvp)
        else:
            raise ValueError(f"unknown loss term {term!r}")
        return value, seq.theta_gradient(grad)

    def gap(self, seq: RelaxedSequence) -> float:
        return quantization_gap_ctx(self, seq)


def composite_loss(m, g, seq, x, y, weights=LossWeights(), token_weights=None) -> LossBreakdown:
    return AdversarialLoss(m, g, x, y, weights, token_weights).breakdown(seq)


def composite_gradient(m, g, seq: RelaxedSequence, x, y, weights=LossWeights(), token_weights=None):
    """Returns (grad_theta, grad_pi) of the composite total."""
    _, grad_theta, grad_p = AdversarialLoss(m, g, x, y, weights, token_weights).value_and_grad(seq)
    return grad_theta, grad_p


def quantization_gap_ctx(loss: AdversarialLoss, seq: RelaxedSequence) -> float:
    if seq.fully_quantized:
        return 0.0
    return loss.total(quantize_all_argmax(seq)) - loss.total(seq)


def quantization_gap(m, g, seq, x, y, weights=LossWeights(), token_weights=None) -> float:
    """total(argmax-quantized copy) - total(seq)."""
    return quantization_gap_ctx(AdversarialLoss(m, g, x, y, weights, token_weights), seq)
