"""Relaxed token sequences: rows of probability vectors parameterised by logits."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from ._kernels import K


@dataclass
class Vocabulary:
    """Token strings, corpus frequencies and an optional embedding table."""

    tokens: List[str]
    frequencies: Optional[np.ndarray] = None
    embeddings: Optional[np.ndarray] = None

    def __post_init__(self):
        self.tokens = [str(t) for t in self.tokens]
        if len(self.tokens) < 2:
            raise ValueError("vocabulary needs at least 2 tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("token strings must be distinct")
        if self.frequencies is None:
            self.frequencies = np.ones(len(self.tokens))
        self.frequencies = np.asarray(self.frequencies, dtype=np.float64)
        if self.frequencies.shape != (len(self.tokens),):
            raise ValueError("need exactly one frequency per token")
        if not np.all(self.frequencies > 0):
            raise ValueError("frequencies must be positive")
        if self.embeddings is not None:
            self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
            if self.embeddings.ndim != 2 or self.embeddings.shape[0] != len(self.tokens):
                raise ValueError("embedding table must have one row per token")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def to_dict(self) -> dict:
        d = {"tokens": list(self.tokens), "frequencies": self.frequencies.tolist()}
        if self.embeddings is not None:
            d["embeddings"] = self.embeddings.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(d["tokens"], d.get("frequencies"), d.get("embeddings"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple

    def __init__(self, ids: Sequence[int]):
        ids = tuple(int(i) for i in ids)
        if not ids:
            raise ValueError("token sequence must be nonempty")
        if min(ids) < 0:
            raise ValueError("token ids must be nonnegative")
        object.__setattr__(self, "ids", ids)

    def __len__(self):
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    def validate(self, vocab_size: int) -> None:
        if max(self.ids) >= vocab_size:
            raise ValueError(f"token id {max(self.ids)} out of range for |V|={vocab_size}")

    def one_hot(self, vocab_size: int) -> np.ndarray:
        self.validate(vocab_size)
        out = np.zeros((len(self.ids), vocab_size))
        out[np.arange(len(self.ids)), self.ids] = 1.0
        return out


@dataclass
class RelaxedSequence:
    """Logit matrix ``theta`` (n x |V|) plus a per-position freeze state.

    Frozen positions behave as exact one-hots of ``frozen_ids[i]``; their theta
    rows are ignored.  ``support`` optionally restricts which tokens an
    unfrozen position may place mass on (entries outside it get probability 0).
    """

    theta: np.ndarray
    frozen: np.ndarray = None
    frozen_ids: List[Optional[int]] = None
    support: np.ndarray = None

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        n, V = self.theta.shape
        if self.frozen is None:
            self.frozen = np.zeros(n, dtype=bool)
        if self.frozen_ids is None:
            self.frozen_ids = [None] * n
        if self.support is None:
            self.support = np.ones((n, V), dtype=bool)
        self.frozen = np.asarray(self.frozen, dtype=bool)
        self.support = np.asarray(self.support, dtype=bool)
        if any(f != (k is not None) for f, k in zip(self.frozen, self.frozen_ids)):
            raise ValueError("frozen mask and frozen_ids disagree")
        if not self.support.any(axis=1).all():
            raise ValueError("every position needs at least one supported token")

    @property
    def n(self) -> int:
        return self.theta.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.theta.shape[1]

    @property
    def fully_quantized(self) -> bool:
        return bool(self.frozen.all())

    def copy(self) -> "RelaxedSequence":
        return RelaxedSequence(self.theta.copy(), self.frozen.copy(),
                               list(self.frozen_ids), self.support.copy())

    def probability_matrix(self) -> np.ndarray:
        p = K.softmax_rows(self.theta, self.support)
        for i in np.flatnonzero(self.frozen):
            p[i] = 0.0
            p[i, self.frozen_ids[i]] = 1.0
        return p

    def probabilities(self, i: int) -> np.ndarray:
        if not 0 <= i < self.n:
            raise IndexError(f"position {i} out of range for n={self.n}")
        if self.frozen[i]:
            p = np.zeros(self.vocab_size)
            p[self.frozen_ids[i]] = 1.0
            return p
        return K.softmax_rows(self.theta[i:i + 1], self.support[i:i + 1])[0]

    def theta_gradient(self, grad_p: np.ndarray) -> np.ndarray:
        """Chain d/dpi through the softmax Jacobian; frozen rows come out zero."""
        p = self.probability_matrix()
        g = K.softmax_rows_vjp(p, np.ascontiguousarray(grad_p, dtype=np.float64))
        g[self.frozen] = 0.0
        return g

    def argmax_ids(self) -> List[int]:
        """Current token per position: frozen id, else argmax of pi (first on ties)."""
        p = self.probability_matrix()
        return [int(k) if f else int(np.argmax(row))
                for f, k, row in zip(self.frozen, self.frozen_ids, p)]


def initialize_relaxed(x: TokenSequence, C: float, vocab: Vocabulary | int,
                       support: np.ndarray | None = None) -> RelaxedSequence:
    """theta[i, j] = C if j == x[i] else 0, nothing frozen."""
    V = vocab if isinstance(vocab, int) else vocab.size
    if len(x) == 0:
        raise ValueError("cannot relax an empty sequence")
    if C < 0:
        raise ValueError("init scale C must be nonnegative")
    return RelaxedSequence(C * x.one_hot(V), support=support)


def probabilities(seq: RelaxedSequence, i: int) -> np.ndarray:
    return seq.probabilities(i)


def embed(pi: np.ndarray, E: np.ndarray) -> np.ndarray:
    """Mixture of embedding rows weighted by pi."""
    pi = np.asarray(pi, dtype=np.float64)
    E = np.asarray(E, dtype=np.float64)
    if pi.ndim != 1 or E.ndim != 2 or E.shape[0] != pi.shape[0]:
        raise ValueError(f"cannot embed pi of shape {pi.shape} with table {E.shape}")
    return pi @ E


def entropy(pi: np.ndarray) -> float:
    pi = np.asarray(pi, dtype=np.float64).reshape(1, -1)
    return float(K.row_entropy(pi)[0])


def entropies(seq: RelaxedSequence) -> np.ndarray:
    return K.row_entropy(seq.probability_matrix())


def quantize(seq: RelaxedSequence, i: int, k: int) -> RelaxedSequence:
    """Return a copy of ``seq`` with position i frozen to token k."""
    if not 0 <= i < seq.n:
        raise IndexError(f"position {i} out of range for n={seq.n}")
    if not 0 <= k < seq.vocab_size:
        raise IndexError(f"token {k} out of range for |V|={seq.vocab_size}")
    if seq.frozen[i]:
        raise ValueError(f"position {i} is already quantized")
    out = seq.copy()
    out.frozen[i] = True
    out.frozen_ids[i] = int(k)
    return out


def quantize_all_argmax(seq: RelaxedSequence) -> RelaxedSequence:
    out = seq.copy()
    ids = seq.argmax_ids()
    for i in range(seq.n):
        if not out.frozen[i]:
            out.frozen[i] = True
            out.frozen_ids[i] = ids[i]
    return out


def to_token_sequence(seq: RelaxedSequence) -> TokenSequence:
    if not seq.fully_quantized:
        missing = np.flatnonzero(~seq.frozen).tolist()
        raise ValueError(f"positions {missing} are not quantized")
    return TokenSequence(seq.frozen_ids)
