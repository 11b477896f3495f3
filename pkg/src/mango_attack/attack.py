"""Quantization-compensation attack loop, the one-shot baseline and the zeroth-order variant."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, List, Optional

import numpy as np

from ._kernels import K
from .loss import AdversarialLoss, LossBreakdown, LossWeights, inverse_frequency_weights
from .models import CountingClassifier
from .optimizers import OptimizerState, StepSchedule
from .relaxation import (
    RelaxedSequence,
    TokenSequence,
    Vocabulary,
    entropies,
    initialize_relaxed,
    quantize,
    quantize_all_argmax,
    to_token_sequence,
)

log = logging.getLogger(__name__)

VARIANTS = ("mango", "naive", "gray")


class NonFiniteLossError(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass
class OptimizerConfig:
    variant: str = "adam"
    lr: float = 0.3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    reset_on_quantize: bool = True

    def make_state(self, shape) -> OptimizerState:
        return OptimizerState(shape, self.lr, self.beta1, self.beta2, self.eps, self.variant)


@dataclass
class ZooConfig:
    samples: int = 20
    noise_scale: float = 0.1
    similarity_floor: float = 0.0

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("zoo.samples must be >= 1")
        if self.noise_scale <= 0:
            raise ValueError("zoo.noise_scale must be positive")


@dataclass
class AttackConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    lambda_prob: float = 0.5
    max_candidates: int = 5
    candidate_threshold: float = 0.5
    init_scale: float = 10.0
    schedule: StepSchedule = field(default_factory=StepSchedule)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    variant: str = "mango"
    zoo: ZooConfig = field(default_factory=ZooConfig)
    seed: int = 0
    recompute_score_gradient: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown attack variant {self.variant!r}")
        if not 0.0 <= self.lambda_prob <= 1.0:
            raise ValueError("lambda_prob must lie in [0, 1]")
        if self.max_candidates < 1:
            raise ValueError("max_candidates must be >= 1")
        if not 0.0 <= self.candidate_threshold <= 1.0:
            raise ValueError("candidate_threshold must lie in [0, 1]")
        if self.init_scale < 0:
            raise ValueError("init_scale must be nonnegative")

    @classmethod
    def for_variant(cls, variant: str, **overrides) -> "AttackConfig":
        """Defaults for a variant. gray starts from S=140 and lambda_s=80."""
        if variant == "gray":
            base = dict(weights=LossWeights(lambda_s=80.0), schedule=StepSchedule(140))
            base.update(overrides)
            return cls(variant="gray", **base).resolved()
        return cls(variant=variant, **overrides)

    def resolved(self) -> "AttackConfig":
        """Apply the settings the gray variant always forces."""
        if self.variant != "gray":
            return self
        opt = replace(self.optimizer, variant="amsgrad", reset_on_quantize=False)
        return replace(self, lambda_prob=1.0, optimizer=opt)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = {"initial_steps": self.schedule.initial_steps}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        d = dict(d)
        kw = {}
        if "weights" in d:
            kw["weights"] = LossWeights(**d.pop("weights"))
        if "schedule" in d:
            kw["schedule"] = StepSchedule(**d.pop("schedule"))
        if "optimizer" in d:
            kw["optimizer"] = OptimizerConfig(**d.pop("optimizer"))
        if "zoo" in d:
            kw["zoo"] = ZooConfig(**d.pop("zoo"))
        return cls(**kw, **d)


# --------------------------------------------------------------------------
# results
# --------------------------------------------------------------------------


@dataclass
class CandidateScore:
    token: int
    probability: float
    direction: float
    score: float
    rescaled_score: float


@dataclass
class RoundRecord:
    round: int
    position: int
    entropy: float
    chosen_token: int
    loss_before: float
    loss_after: float
    gap: float
    candidates: List[int] = field(default_factory=list)


ROUND_CSV_COLUMNS = ("round", "position", "entropy", "chosen_token", "loss_before", "loss_after", "gap")


@dataclass
class AttackResult:
    variant: str
    original: List[int]
    label: int
    adversarial: Optional[List[int]]
    success: bool
    trivial: bool
    loss_trace: List[float]
    round_trace: List[RoundRecord]
    final_breakdown: Optional[LossBreakdown]
    config_echo: dict
    seed: int
    instance: int = 0
    queries: dict = field(default_factory=dict)
    error: Optional[str] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["final_breakdown"] = None if self.final_breakdown is None else self.final_breakdown.to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackResult":
        d = dict(d)
        d["round_trace"] = [RoundRecord(**r) for r in d["round_trace"]]
        if d["final_breakdown"] is not None:
            d["final_breakdown"] = LossBreakdown.from_dict(d["final_breakdown"])
        return cls(**d)

    def round_rows(self):
        return [[getattr(r, c) for c in ROUND_CSV_COLUMNS] for r in self.round_trace]


# --------------------------------------------------------------------------
# per-round operations
# --------------------------------------------------------------------------


def select_vector(seq: RelaxedSequence) -> int:
    """Unfrozen position of maximal entropy; ties go to the smallest index."""
    if seq.fully_quantized:
        raise ValueError("every position is already quantized")
    h = entropies(seq)
    h[seq.frozen] = -np.inf
    return int(np.argmax(h))


def direction_scores(pi, grad_pi) -> np.ndarray:
    """cos(onehot(k) - pi, -grad) for every token k (0 for degenerate steps)."""
    return K.direction_scores(np.ascontiguousarray(pi, dtype=np.float64),
                              np.ascontiguousarray(grad_pi, dtype=np.float64))


def direction_score(pi, grad_pi, k: int) -> float:
    return float(direction_scores(pi, grad_pi)[k])


def select_candidates(pi, grad_pi, cfg: AttackConfig, allowed=None) -> List[CandidateScore]:
    """Score every (allowed) token, min-max rescale, keep those within T of the best, cap at M."""
    pi = np.asarray(pi, dtype=np.float64)
    lam = cfg.lambda_prob
    d = direction_scores(pi, grad_pi)
    s = lam * pi + (1.0 - lam) * d
    tokens = np.arange(len(pi)) if allowed is None else np.flatnonzero(allowed)
    if len(tokens) == 0:
        raise ValueError("no allowed tokens")
    st = s[tokens]
    lo, hi = st.min(), st.max()
    rescaled = np.ones_like(st) if hi - lo <= 0.0 else (st - lo) / (hi - lo)
    keep = np.flatnonzero(rescaled >= 1.0 - cfg.candidate_threshold)
    # descending score, then ascending token id
    order = sorted(keep, key=lambda j: (-st[j], tokens[j]))[: cfg.max_candidates]
    return [CandidateScore(int(tokens[j]), float(pi[tokens[j]]), float(d[tokens[j]]),
                           float(st[j]), float(rescaled[j])) for j in order]


def evaluate_and_quantize(seq: RelaxedSequence, i: int, candidates: List[CandidateScore],
                          loss: AdversarialLoss):
    """Freeze position i to the candidate with the lowest total loss.

    Candidates are assumed ordered by descending score, so the first of several
    equal totals wins (higher score, then smaller token).
    """
    if not candidates:
        raise ValueError("no candidates to evaluate")
    best = None
    for cand in candidates:
        trial = quantize(seq, i, cand.token)
        bd = loss.breakdown(trial)
        if not np.isfinite(bd.total):
            raise NonFiniteLossError(f"non-finite loss for token {cand.token} at position {i}")
        if best is None or bd.total < best[2].total:
            best = (trial, cand, bd)
    return best


# --------------------------------------------------------------------------
# zeroth-order gradient
# --------------------------------------------------------------------------


def zoo_gradient(loss_fn: Callable[[np.ndarray], float], theta, samples: int, mu: float,
                 rng: np.random.Generator, mask=None, noise=None, base_value=None):
    """Gaussian-smoothing estimate (1/K) sum_i [f(theta + mu u_i) - f(theta)] / mu * u_i.

    ``mask`` zeroes the noise (and so the estimate) on excluded entries.
    ``noise`` optionally supplies the K perturbation matrices directly.
    Samples whose perturbed loss is non-finite are skipped.
    """
    if samples < 1 or mu <= 0:
        raise ValueError("need samples >= 1 and mu > 0")
    theta = np.asarray(theta, dtype=np.float64)
    base = loss_fn(theta) if base_value is None else base_value
    acc = np.zeros_like(theta)
    used = 0
    for s in range(samples):
        u = rng.standard_normal(theta.shape) if noise is None else np.asarray(noise[s], dtype=np.float64)
        if mask is not None:
            u = u * mask
        value = loss_fn(theta + mu * u)
        if not np.isfinite(value):
            log.warning("zoo sample %d gave non-finite loss; skipped", s)
            continue
        acc += (value - base) / mu * u
        used += 1
    if used == 0:
        raise NonFiniteLossError("every zoo sample produced a non-finite loss")
    return acc / used


# --------------------------------------------------------------------------
# attack runners
# --------------------------------------------------------------------------


def _predicts(m, P, y) -> bool:
    return int(np.argmax(m.logits(P))) == y


def _token_weights(x, vocab):
    return None if vocab is None else inverse_frequency_weights(x, vocab.frequencies)


def _finish(variant, x, y, cfg, loss, seq, loss_trace, rounds, instance, queries=None, error=None):
    adversarial = None
    success = False
    final = None
    if seq.fully_quantized:
        adv = to_token_sequence(seq)
        adversarial = list(adv.ids)
        final = loss.breakdown(seq)
        success = not _predicts(loss.m, seq.probability_matrix(), y)
    return AttackResult(
        variant=variant, original=list(x.ids), label=int(y), adversarial=adversarial,
        success=success, trivial=False, loss_trace=loss_trace, round_trace=rounds,
        final_breakdown=final, config_echo=cfg.to_dict(), seed=cfg.seed, instance=instance,
        queries=queries or {}, error=error,
    )


def _trivial(variant, x, y, cfg, instance):
    return AttackResult(variant=variant, original=list(x.ids), label=int(y),
                        adversarial=list(x.ids), success=True, trivial=True, loss_trace=[],
                        round_trace=[], final_breakdown=None, config_echo=cfg.to_dict(),
                        seed=cfg.seed, instance=instance)


def _check_finite(bd):
    if not np.isfinite(bd.total):
        raise NonFiniteLossError(f"non-finite loss {bd}")


def _quantization_loop(loss, seq, cfg, gradient_fn, allowed=None, observer=None):
    """Shared body of the white-box and zeroth-order loops. Mutates nothing it doesn't own."""
    opt = cfg.optimizer.make_state(seq.theta.shape)
    loss_trace, rounds = [], []
    for l in range(seq.n):
        bd = grad_theta = grad_p = None
        for _ in range(cfg.schedule.steps_at(l)):
            bd, grad_theta, grad_p = gradient_fn(seq)
            _check_finite(bd)
            loss_trace.append(bd.total)
            if observer is not None:
                observer("step", seq=seq, total=bd.total, round=l)
            opt.step(seq.theta, grad_theta, seq.frozen)
        if cfg.recompute_score_gradient or grad_p is None:
            bd, grad_theta, grad_p = gradient_fn(seq)
            _check_finite(bd)
        else:
            bd = loss.breakdown(seq)

        i = select_vector(seq)
        h = float(entropies(seq)[i])
        gap = loss.gap(seq)
        loss_before = bd.total
        pi = seq.probabilities(i)
        cands = select_candidates(pi, grad_p[i], cfg, None if allowed is None else allowed[i])
        seq, chosen, after = evaluate_and_quantize(seq, i, cands, loss)
        rounds.append(RoundRecord(l, i, h, chosen.token, loss_before, after.total, gap,
                                  [c.token for c in cands]))
        if observer is not None:
            observer("quantize", seq=seq, round=l, position=i,
                     loss_before=loss_before, loss_after=after.total)
        opt.clear_rows(i)
        if cfg.optimizer.reset_on_quantize:
            opt.reset()
    return seq, loss_trace, rounds


def run_mango(m, g, x: TokenSequence, y: int, cfg: AttackConfig = None,
              vocab: Vocabulary = None, instance: int = 0, observer=None) -> AttackResult:
    """Quantize one position per round, re-optimizing the rest in between."""
    cfg = cfg or AttackConfig()
    loss = AdversarialLoss(m, g, x, y, cfg.weights, _token_weights(x, vocab))
    seq = initialize_relaxed(x, cfg.init_scale, m.vocab_size)
    if not _predicts(m, x.one_hot(m.vocab_size), y):
        return _trivial("mango", x, y, cfg, instance)
    try:
        seq, trace, rounds = _quantization_loop(loss, seq, cfg, loss.value_and_grad,
                                                observer=observer)
    except NonFiniteLossError as exc:
        return _finish("mango", x, y, cfg, loss, seq, [], [], instance, error=str(exc))
    return _finish("mango", x, y, cfg, loss, seq, trace, rounds, instance)


def run_naive(m, g, x: TokenSequence, y: int, cfg: AttackConfig = None,
              vocab: Vocabulary = None, instance: int = 0, observer=None) -> AttackResult:
    """Optimize every position for S steps, then argmax-quantize all of them at once."""
    cfg = cfg or AttackConfig(variant="naive")
    loss = AdversarialLoss(m, g, x, y, cfg.weights, _token_weights(x, vocab))
    seq = initialize_relaxed(x, cfg.init_scale, m.vocab_size)
    if not _predicts(m, x.one_hot(m.vocab_size), y):
        return _trivial("naive", x, y, cfg, instance)
    opt = cfg.optimizer.make_state(seq.theta.shape)
    trace = []
    try:
        for _ in range(cfg.schedule.initial_steps):
            bd, grad_theta, _ = loss.value_and_grad(seq)
            _check_finite(bd)
            trace.append(bd.total)
            if observer is not None:
                observer("step", seq=seq, total=bd.total, round=0)
            opt.step(seq.theta, grad_theta, seq.frozen)
        h = entropies(seq)
        before = loss.breakdown(seq)
        _check_finite(before)
        quantized = quantize_all_argmax(seq)
        after = loss.breakdown(quantized)
        _check_finite(after)
    except NonFiniteLossError as exc:
        return _finish("naive", x, y, cfg, loss, seq, [], [], instance, error=str(exc))
    gap = after.total - before.total
    rounds = [RoundRecord(0, i, float(h[i]), quantized.frozen_ids[i], before.total, after.total, gap,
                          [quantized.frozen_ids[i]]) for i in range(seq.n)]
    if observer is not None:
        observer("quantize", seq=quantized, round=0, position=-1,
                 loss_before=before.total, loss_after=after.total)
    return _finish("naive", x, y, cfg, loss, quantized, trace, rounds, instance)


def similarity_support(x: TokenSequence, embeddings, floor: float) -> np.ndarray:
    """allowed[i, k]: cosine(emb[k], emb[x_i]) >= floor; the original token is always allowed."""
    E = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(E, axis=1)
    norms[norms == 0.0] = 1.0
    U = E / norms[:, None]
    orig = np.asarray(x.ids)
    cos = U[orig] @ U.T
    allowed = cos >= floor
    allowed[np.arange(len(orig)), orig] = True
    return allowed


def run_gray(m, g, x: TokenSequence, y: int, cfg: AttackConfig = None,
             vocab: Vocabulary = None, instance: int = 0, observer=None) -> AttackResult:
    """Zeroth-order variant: the classifier is only ever queried for logits.

    The classifier is wrapped in a black-box counter; any gradient query raises.
    """
    cfg = (cfg or AttackConfig.for_variant("gray")).resolved()
    bb = m if isinstance(m, CountingClassifier) else CountingClassifier(m, black_box=True)
    bb.black_box = True
    allowed = None
    if cfg.zoo.similarity_floor > -1.0:
        if vocab is None or vocab.embeddings is None:
            raise ValueError("similarity filter needs a vocabulary with an embedding table")
        allowed = similarity_support(x, vocab.embeddings, cfg.zoo.similarity_floor)
    loss = AdversarialLoss(bb, g, x, y, cfg.weights, _token_weights(x, vocab))
    seq = initialize_relaxed(x, cfg.init_scale, bb.vocab_size, support=allowed)
    if not _predicts(bb, x.one_hot(bb.vocab_size), y):
        res = _trivial("gray", x, y, cfg, instance)
        res.queries = {"forward": bb.forward_queries, "gradient": bb.gradient_queries}
        return res
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, instance]))
    zoo = cfg.zoo

    def zoo_step(s):
        probe = s.copy()
        mask = (s.support & ~s.frozen[:, None]).astype(np.float64)

        def f(theta):
            probe.theta = theta
            return loss.total(probe)

        bd = loss.breakdown(s)
        grad = zoo_gradient(f, s.theta, zoo.samples, zoo.noise_scale, rng, mask=mask,
                            base_value=bd.total)
        # lambda_prob is forced to 1, so the pi-gradient never enters the scores
        return bd, grad, np.zeros_like(s.theta)

    try:
        seq, trace, rounds = _quantization_loop(loss, seq, cfg, zoo_step, allowed=allowed,
                                                observer=observer)
        res = _finish("gray", x, y, cfg, loss, seq, trace, rounds, instance)
    except NonFiniteLossError as exc:
        res = _finish("gray", x, y, cfg, loss, seq, [], [], instance, error=str(exc))
    res.queries = {"forward": bb.forward_queries, "gradient": bb.gradient_queries}
    return res


RUNNERS = {"mango": run_mango, "naive": run_naive, "gray": run_gray}


def run_attack(m, g, x, y, cfg: AttackConfig, vocab=None, instance=0, observer=None):
    return RUNNERS[cfg.variant](m, g, x, y, cfg, vocab=vocab, instance=instance, observer=observer)
