"""Synthetic tasks, batch runs, gap traces, verification suites and TOML config."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .attack import (
    ROUND_CSV_COLUMNS,
    AttackConfig,
    AttackResult,
    OptimizerConfig,
    ZooConfig,
    run_attack,
    zoo_gradient,
)
from .loss import AdversarialLoss, LossWeights, inverse_frequency_weights
from .models import ToyClassifier, ToyReferenceModel, gradient_check
from .optimizers import StepSchedule
from .relaxation import RelaxedSequence, TokenSequence, Vocabulary, quantize_all_argmax

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# tasks
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TaskSpec:
    vocab_size: int = 12
    seq_len: int = 6
    num_labels: int = 2
    classifier_seed: int = 1
    reference_seed: int = 2
    dataset_seed: int = 3
    num_instances: int = 20
    model_dim: int = 8
    context_dim: int = 8
    logit_scale: float = 4.0
    context_bias: float = 1.0

    def __post_init__(self):
        if self.vocab_size < 2 or self.seq_len < 1 or self.num_labels < 2:
            raise ValueError("need vocab_size >= 2, seq_len >= 1, num_labels >= 2")
        if self.num_instances < 0:
            raise ValueError("num_instances must be nonnegative")


@dataclass
class Task:
    spec: TaskSpec
    classifier: ToyClassifier
    reference: ToyReferenceModel
    vocab: Vocabulary
    instances: List[tuple]


def build_models(spec: TaskSpec):
    m = ToyClassifier(spec.vocab_size, spec.model_dim, spec.num_labels, spec.classifier_seed,
                      logit_scale=spec.logit_scale)
    g = ToyReferenceModel(spec.vocab_size, spec.model_dim, spec.context_dim, spec.reference_seed,
                          context_bias=spec.context_bias)
    # Zipf-like corpus frequencies; the reference model's token table stands in
    # for a generic word-embedding table.
    freq = 1.0 / np.arange(1, spec.vocab_size + 1)
    vocab = Vocabulary([f"t{i}" for i in range(spec.vocab_size)], freq, g.Er.copy())
    return m, g, vocab


def generate_task(spec: TaskSpec, models=None) -> List[tuple]:
    """(TokenSequence, label) pairs; labels are the classifier's own predictions."""
    m, _, vocab = models or build_models(spec)
    rng = np.random.default_rng(spec.dataset_seed)
    p = vocab.frequencies / vocab.frequencies.sum()
    out = []
    for _ in range(spec.num_instances):
        x = TokenSequence(rng.choice(spec.vocab_size, spec.seq_len, p=p))
        y = int(np.argmax(m.logits(x.one_hot(spec.vocab_size))))
        out.append((x, y))
    return out


def build_task(spec: TaskSpec) -> Task:
    m, g, vocab = build_models(spec)
    return Task(spec, m, g, vocab, generate_task(spec, (m, g, vocab)))


# --------------------------------------------------------------------------
# config files
# --------------------------------------------------------------------------

_ATTACK_KEYS = {"variant", "lambda_f", "lambda_s", "kappa", "lambda_prob", "max_candidates",
                "candidate_threshold", "init_scale", "steps", "seed", "recompute_score_gradient"}


def _check_keys(section, data, allowed):
    unknown = set(data) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")


def config_from_dict(doc: dict, variant=None, seed=None):
    """Build (TaskSpec, AttackConfig) from a parsed TOML document plus CLI overrides."""
    _check_keys("top level", doc, {"task", "attack", "optimizer", "zoo"})
    task = doc.get("task", {})
    attack = dict(doc.get("attack", {}))
    opt = doc.get("optimizer", {})
    zoo = doc.get("zoo", {})
    _check_keys("task", task, {f.name for f in fields(TaskSpec)})
    _check_keys("attack", attack, _ATTACK_KEYS)
    _check_keys("optimizer", opt, {f.name for f in fields(OptimizerConfig)})
    _check_keys("zoo", zoo, {f.name for f in fields(ZooConfig)})
    if variant is not None:
        attack["variant"] = variant
    if seed is not None:
        attack["seed"] = seed
    try:
        spec = TaskSpec(**task)
        v = attack.get("variant", "mango")
        gray = v == "gray"
        weights = LossWeights(
            lambda_f=attack.get("lambda_f", 1.0),
            lambda_s=attack.get("lambda_s", 80.0 if gray else 20.0),
            kappa=attack.get("kappa", 5.0),
        )
        cfg = AttackConfig(
            weights=weights,
            lambda_prob=attack.get("lambda_prob", 0.5),
            max_candidates=attack.get("max_candidates", 5),
            candidate_threshold=attack.get("candidate_threshold", 0.5),
            init_scale=attack.get("init_scale", 10.0),
            schedule=StepSchedule(attack.get("steps", 140 if gray else 100)),
            optimizer=OptimizerConfig(**opt),
            variant=v,
            zoo=ZooConfig(**zoo),
            seed=attack.get("seed", 0),
            recompute_score_gradient=attack.get("recompute_score_gradient", True),
        ).resolved()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return spec, cfg


def load_config(path=None, variant=None, seed=None):
    doc = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(doc, variant, seed)


def config_hash(spec: TaskSpec, cfg: AttackConfig) -> str:
    blob = json.dumps({"task": asdict(spec), "attack": cfg.to_dict()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


# --------------------------------------------------------------------------
# batches
# --------------------------------------------------------------------------


def _run_one(args):
    spec, cfg, index, x_ids, y = args
    m, g, vocab = build_models(spec)
    try:
        return run_attack(m, g, TokenSequence(x_ids), y, cfg, vocab=vocab, instance=index).to_dict()
    except Exception as exc:  # recorded per instance, the batch carries on
        log.exception("instance %d failed", index)
        return {"instance": index, "variant": cfg.variant, "original": list(x_ids), "label": y,
                "error": f"{type(exc).__name__}: {exc}"}


def run_instances(spec: TaskSpec, cfg: AttackConfig, workers: int = 1) -> List[dict]:
    instances = generate_task(spec)
    jobs = [(spec, cfg, i, list(x.ids), y) for i, (x, y) in enumerate(instances)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_one, jobs))  # map keeps instance order
    return [_run_one(j) for j in jobs]


def _mean(values):
    return float(np.mean(values)) if len(values) else None


def aggregate_metrics(results: List[dict]) -> dict:
    """Everything in the manifest's metrics block, from result records alone."""
    done = [r for r in results if r.get("error") is None and r.get("adversarial") is not None]
    totals = [r["final_breakdown"]["total"] for r in done if r.get("final_breakdown")]
    per_round = {}
    for r in done:
        for rec in r.get("round_trace", []):
            per_round.setdefault(rec["round"], []).append(rec["gap"])
    return {
        "num_instances": len(results),
        "num_completed": len(done),
        "num_errors": len(results) - len(done),
        "success_rate": (sum(bool(r["success"]) for r in done) / len(done)) if done else None,
        "mean_final_total": _mean(totals),
        "mean_gap_per_round": [_mean(per_round[k]) for k in sorted(per_round)],
    }


def write_round_trace(path, result: dict):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ROUND_CSV_COLUMNS)
        for rec in result.get("round_trace", []):
            w.writerow([rec[c] for c in ROUND_CSV_COLUMNS])


def run_batch(spec: TaskSpec, cfg: AttackConfig, out_dir=None, workers: int = 1) -> dict:
    """Run cfg.variant on every task instance; optionally persist results and manifest."""
    results = run_instances(spec, cfg, workers)
    lines = [json.dumps(r, sort_keys=True) for r in results]
    manifest = {
        "config_hash": config_hash(spec, cfg),
        "variant": cfg.variant,
        "task": asdict(spec),
        "attack": cfg.to_dict(),
        "results_file": "results.jsonl",
        "trace_files": [f"trace_{r['instance']}.csv" for r in results],
        "results_sha256": hashlib.sha256("\n".join(lines).encode()).hexdigest(),
        "metrics": aggregate_metrics(results),
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "results.jsonl").write_text("".join(line + "\n" for line in lines))
        for r in results:
            write_round_trace(out / f"trace_{r['instance']}.csv", r)
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    manifest["results"] = results
    return manifest


def read_results(path) -> List[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def compare_variants(spec: TaskSpec, cfg: AttackConfig, out_dir=None, workers: int = 1) -> dict:
    """Paired MANGO vs Naive run on the same instances with otherwise identical settings."""
    out = Path(out_dir) if out_dir is not None else None
    runs = {}
    for variant in ("mango", "naive"):
        c = AttackConfig.from_dict({**cfg.to_dict(), "variant": variant})
        runs[variant] = run_batch(spec, c, None if out is None else out / variant, workers)
    pairs = []
    for a, b in zip(runs["mango"]["results"], runs["naive"]["results"]):
        if a.get("final_breakdown") and b.get("final_breakdown"):
            pairs.append((a["instance"], a["final_breakdown"]["total"], b["final_breakdown"]["total"]))
    report = {
        "pairs": [{"instance": i, "mango": ma, "naive": na} for i, ma, na in pairs],
        "fraction_mango_le_naive": (sum(ma <= na for _, ma, na in pairs) / len(pairs)) if pairs else None,
        "mean_mango": _mean([p[1] for p in pairs]),
        "mean_naive": _mean([p[2] for p in pairs]),
        "success_rate_mango": runs["mango"]["metrics"]["success_rate"],
        "success_rate_naive": runs["naive"]["metrics"]["success_rate"],
    }
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "compare.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return report


# --------------------------------------------------------------------------
# gap traces
# --------------------------------------------------------------------------

GAP_CSV_COLUMNS = ("row", "round", "kind", "position", "continuous_total", "quantized_total",
                   "gap", "event_delta")


class GapRecorder:
    """Observer that logs continuous vs argmax-quantized totals at every step.

    ``quantize`` rows describe the state after the quantization event;
    ``event_delta`` is the loss change the event itself caused.
    """

    def __init__(self, loss: AdversarialLoss):
        self.loss = loss
        self.rows = []

    def _row(self, rnd, kind, position, seq, delta):
        cont = self.loss.total(seq)
        quant = cont if seq.fully_quantized else self.loss.total(quantize_all_argmax(seq))
        self.rows.append([len(self.rows), rnd, kind, position, cont, quant, quant - cont, delta])

    def __call__(self, event, seq, round, position=-1, loss_before=None, loss_after=None, **_):
        if event == "step":
            self._row(round, "step", -1, seq, 0.0)
        else:
            self._row(round, "quantize", position, seq, loss_after - loss_before)


def gap_trace(spec: TaskSpec, cfg: AttackConfig, out_dir=None) -> dict:
    """Per-instance gap rows for mango or naive; written as trace_<instance>.csv."""
    if cfg.variant not in ("mango", "naive"):
        raise ConfigError("gap traces are defined for mango and naive only")
    m, g, vocab = build_models(spec)
    traces = {}
    for i, (x, y) in enumerate(generate_task(spec, (m, g, vocab))):
        loss = AdversarialLoss(m, g, x, y, cfg.weights, inverse_frequency_weights(x, vocab.frequencies))
        rec = GapRecorder(loss)
        run_attack(m, g, x, y, cfg, vocab=vocab, instance=i, observer=rec)
        traces[i] = rec.rows
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for i, rows in traces.items():
            with open(out / f"trace_{i}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(GAP_CSV_COLUMNS)
                w.writerows(rows)
    return traces


# --------------------------------------------------------------------------
# verification suites
# --------------------------------------------------------------------------


@dataclass
class CheckCase:
    name: str
    value: float
    threshold: float
    passed: bool
    informational: bool = False


@dataclass
class Report:
    title: str
    cases: List[CheckCase] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.cases if not c.informational)

    def lines(self):
        for c in self.cases:
            tag = "INFO" if c.informational else ("PASS" if c.passed else "FAIL")
            yield f"[{tag}] {c.name}: {c.value:.3e} (threshold {c.threshold:g})"
        yield f"{self.title}: {'PASS' if self.passed else 'FAIL'}"


def random_instance(seed, max_vocab=12, max_len=6, freeze=True):
    """Seeded random (models, x, y, relaxed seq) with |V| <= 12, n <= 6."""
    rng = np.random.default_rng(seed)
    V = int(rng.integers(3, max_vocab + 1))
    n = int(rng.integers(1, max_len + 1))
    m = ToyClassifier(V, 8, int(rng.integers(2, 4)), seed=10_000 + seed)
    g = ToyReferenceModel(V, 8, 8, seed=20_000 + seed)
    x = TokenSequence(rng.integers(0, V, n))
    y = int(np.argmax(m.logits(x.one_hot(V))))
    seq = RelaxedSequence(2.0 * rng.standard_normal((n, V)))
    if freeze and n > 1:
        i = int(rng.integers(0, n))
        seq.frozen[i] = True
        seq.frozen_ids[i] = int(rng.integers(0, V))
    w = rng.uniform(0.5, 2.0, n)
    return m, g, x, y, seq, w


def run_gradcheck(seeds=range(20), h=1e-5, tol=1e-6) -> Report:
    report = Report("gradcheck")
    for seed in seeds:
        m, g, x, y, seq, w = random_instance(seed)
        loss = AdversarialLoss(m, g, x, y, LossWeights(), w)
        for term in ("margin", "fluency", "similarity", "total"):
            err = gradient_check(lambda s: loss.term_value_and_grad(s, term), seq, h)
            report.cases.append(CheckCase(f"seed={seed} term={term}", err, tol, err < tol))
    return report


def _cosine(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def zoo_cosines(seeds=range(10), samples=1000, mu=1e-3):
    """Cosine between the ZOO estimate and the analytic theta-gradient of the toy composite."""
    out = []
    for seed in seeds:
        m, g, x, y, seq, w = random_instance(seed, freeze=False)
        seq = RelaxedSequence(seq.theta)
        loss = AdversarialLoss(m, g, x, y, LossWeights(), w)
        _, grad, _ = loss.value_and_grad(seq)
        probe = seq.copy()

        def f(theta):
            probe.theta = theta
            return loss.total(probe)

        est = zoo_gradient(f, seq.theta, samples, mu, np.random.default_rng(seed))
        out.append(_cosine(est, grad))
    return out


def zoo_quadratic(samples=10_000, mu=1e-4, seed=0):
    return float(zoo_gradient(lambda t: float(t[0] ** 2), np.array([1.0]), samples, mu,
                              np.random.default_rng(seed))[0])


def run_zoocheck(samples=1000, mu=1e-3, seeds=range(10)) -> Report:
    report = Report("zoo-check")
    cos = zoo_cosines(seeds, samples, mu)
    report.cases.append(CheckCase(f"mean cosine K={samples} mu={mu:g}", float(np.mean(cos)), 0.9,
                                  float(np.mean(cos)) >= 0.9))
    est = zoo_quadratic()
    report.cases.append(CheckCase("|f'(1) - 2| on f=theta^2, K=10000 mu=1e-4", abs(est - 2.0), 0.1,
                                  abs(est - 2.0) <= 0.1))
    single = zoo_cosines(seeds, 1, mu)
    report.cases.append(CheckCase(f"mean cosine K=1 (high variance, sd={np.std(single):.2f})",
                                  float(np.mean(single)), 0.9, float(np.mean(single)) >= 0.9,
                                  informational=True))
    return report
