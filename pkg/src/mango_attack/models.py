"""Toy differentiable classifier / reference model with hand-written gradients.

Both models consume a probability matrix ``P`` (n x |V|), so quantized and
continuous positions go through the same code.  Every forward has a matching
``*_vjp`` that maps an upstream gradient back to d/dP.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ._kernels import K
from .relaxation import RelaxedSequence


def _check_vocab(P, V):
    if P.ndim != 2 or P.shape[1] != V:
        raise ValueError(f"probability matrix {P.shape} does not match |V|={V}")


def _pack(params):
    return {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in params.items()}


def _unpack(d):
    return {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in d.items()}


class ToyClassifier:
    """logits = W^T meanpool(P E) + b."""

    kind = "toy_classifier"

    def __init__(self, vocab_size, dim=8, num_labels=2, seed=0, logit_scale=4.0, params=None):
        self.vocab_size = int(vocab_size)
        self.dim = int(dim)
        self.num_labels = int(num_labels)
        self.seed = int(seed)
        self.logit_scale = float(logit_scale)
        if self.num_labels < 2:
            raise ValueError("need at least two labels")
        if params is None:
            rng = np.random.default_rng(self.seed)
            params = {
                "E": rng.standard_normal((self.vocab_size, self.dim)),
                "W": rng.standard_normal((self.dim, self.num_labels))
                * (self.logit_scale / np.sqrt(self.dim)),
                "b": 0.1 * rng.standard_normal(self.num_labels),
            }
        self.E = params["E"]
        self.W = params["W"]
        self.b = params["b"]
        # token-level logit table; logits are its row mean under P
        self._token_logits = self.E @ self.W

    def logits(self, P):
        P = np.asarray(P, dtype=np.float64)
        _check_vocab(P, self.vocab_size)
        return P.mean(axis=0) @ self._token_logits + self.b

    def logits_vjp(self, P, g_logits):
        P = np.asarray(P, dtype=np.float64)
        _check_vocab(P, self.vocab_size)
        row = self._token_logits @ np.asarray(g_logits, dtype=np.float64) / P.shape[0]
        return np.broadcast_to(row, P.shape).copy()

    def to_dict(self):
        return {
            "kind": self.kind,
            "seed": self.seed,
            "dims": {"vocab_size": self.vocab_size, "dim": self.dim,
                     "num_labels": self.num_labels, "logit_scale": self.logit_scale},
            "params": _pack({"E": self.E, "W": self.W, "b": self.b}),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(seed=d["seed"], params=_unpack(d["params"]), **d["dims"])


class ToyReferenceModel:
    """Causal next-token model plus unit-norm contextual embeddings.

    next-token, position i > 0:  softmax(tanh(prefix_mean(P Er)_i A) U + u)
    next-token, position 0:      softmax(prior)
    contextual:                  normalize(tanh(e_i Wc + mean(e) Wm + bc))
    """

    kind = "toy_reference"

    def __init__(self, vocab_size, dim=8, ctx_dim=8, seed=0, context_bias=1.0, params=None):
        self.vocab_size = int(vocab_size)
        self.dim = int(dim)
        self.ctx_dim = int(ctx_dim)
        self.seed = int(seed)
        self.context_bias = float(context_bias)
        if params is None:
            rng = np.random.default_rng(self.seed)
            d, dc, V = self.dim, self.ctx_dim, self.vocab_size
            params = {
                "Er": rng.standard_normal((V, d)),
                "A": rng.standard_normal((d, d)) / np.sqrt(d),
                "U": rng.standard_normal((d, V)) * (2.0 / np.sqrt(d)),
                "u": 0.5 * rng.standard_normal(V),
                "prior": rng.standard_normal(V),
                "Wc": rng.standard_normal((d, dc)) / np.sqrt(d),
                "Wm": rng.standard_normal((d, dc)) / np.sqrt(d),
                "bc": self.context_bias * rng.standard_normal(dc),
            }
        for name, value in params.items():
            setattr(self, name, np.asarray(value, dtype=np.float64))

    _param_names = ("Er", "A", "U", "u", "prior", "Wc", "Wm", "bc")

    # -- next-token distributions -------------------------------------------

    def _next_forward(self, P):
        e = P @ self.Er
        c = K.prefix_mean(e)
        h = np.tanh(c @ self.A)
        z = h @ self.U + self.u
        z[0] = self.prior
        z = z - z.max(axis=1, keepdims=True)
        D = np.exp(z)
        D /= D.sum(axis=1, keepdims=True)
        return D, h

    def next_token_distributions(self, P):
        P = np.asarray(P, dtype=np.float64)
        _check_vocab(P, self.vocab_size)
        return self._next_forward(P)[0]

    def next_token_vjp(self, P, dD):
        P = np.asarray(P, dtype=np.float64)
        D, h = self._next_forward(P)
        dz = D * (dD - np.sum(D * dD, axis=1, keepdims=True))
        dz[0] = 0.0  # the prior does not depend on P
        dh = dz @ self.U.T
        da = dh * (1.0 - h * h)
        dc = da @ self.A.T
        de = K.prefix_mean_vjp(np.ascontiguousarray(dc))
        return de @ self.Er.T

    # -- contextual embeddings ---------------------------------------------

    def _ctx_forward(self, P):
        e = P @ self.Er
        a = e @ self.Wc + e.mean(axis=0) @ self.Wm + self.bc
        r = np.tanh(a)
        norm = np.sqrt(np.sum(r * r, axis=1, keepdims=True))
        return r / norm, r, norm

    def contextual_embeddings(self, P):
        P = np.asarray(P, dtype=np.float64)
        _check_vocab(P, self.vocab_size)
        return self._ctx_forward(P)[0]

    def contextual_vjp(self, P, dVc):
        P = np.asarray(P, dtype=np.float64)
        v, r, norm = self._ctx_forward(P)
        dr = (dVc - v * np.sum(v * dVc, axis=1, keepdims=True)) / norm
        da = dr * (1.0 - r * r)
        de = da @ self.Wc.T + (da.sum(axis=0) @ self.Wm.T) / P.shape[0]
        return de @ self.Er.T

    def to_dict(self):
        return {
            "kind": self.kind,
            "seed": self.seed,
            "dims": {"vocab_size": self.vocab_size, "dim": self.dim, "ctx_dim": self.ctx_dim,
                     "context_bias": self.context_bias},
            "params": _pack({k: getattr(self, k) for k in self._param_names}),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(seed=d["seed"], params=_unpack(d["params"]), **d["dims"])


class GradientQueryError(RuntimeError):
    pass


class CountingClassifier:
    """Wraps a classifier and counts forward and gradient queries.

    With ``black_box=True`` any gradient query raises; the count still records
    the attempt.
    """

    def __init__(self, model, black_box=False):
        self.model = model
        self.black_box = black_box
        self.vocab_size = model.vocab_size
        self.num_labels = model.num_labels
        self.forward_queries = 0
        self.gradient_queries = 0

    def logits(self, P):
        self.forward_queries += 1
        return self.model.logits(P)

    def logits_vjp(self, P, g_logits):
        self.gradient_queries += 1
        if self.black_box:
            raise GradientQueryError("gradient query on a black-box classifier")
        return self.model.logits_vjp(P, g_logits)


def classify(model, seq: RelaxedSequence):
    if seq.vocab_size != model.vocab_size:
        raise ValueError(f"sequence |V|={seq.vocab_size} but model |V|={model.vocab_size}")
    return model.logits(seq.probability_matrix())


def next_token_distributions(model, seq: RelaxedSequence):
    return model.next_token_distributions(seq.probability_matrix())


def contextual_embeddings(model, seq: RelaxedSequence):
    return model.contextual_embeddings(seq.probability_matrix())


def gradient_check(f, seq: RelaxedSequence, h=1e-5):
    """Max relative error between f's analytic theta-gradient and central differences.

    ``f(seq)`` returns ``(value, grad_theta)``.  Only unfrozen, supported theta
    entries are compared; error is |analytic - fd| / max(1, |analytic|).
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    _, grad = f(seq)
    grad = np.asarray(grad, dtype=np.float64)
    worst = 0.0
    probe = seq.copy()
    for i in np.flatnonzero(~seq.frozen):
        for j in np.flatnonzero(seq.support[i]):
            orig = probe.theta[i, j]
            probe.theta[i, j] = orig + h
            fp = f(probe)[0]
            probe.theta[i, j] = orig - h
            fm = f(probe)[0]
            probe.theta[i, j] = orig
            fd = (fp - fm) / (2.0 * h)
            err = abs(grad[i, j] - fd) / max(1.0, abs(grad[i, j]))
            worst = max(worst, err)
    return worst


def save_model(model, path):
    Path(path).write_text(json.dumps(model.to_dict()))


def load_model(path):
    d = json.loads(Path(path).read_text())
    cls = {ToyClassifier.kind: ToyClassifier, ToyReferenceModel.kind: ToyReferenceModel}[d["kind"]]
    return cls.from_dict(d)
