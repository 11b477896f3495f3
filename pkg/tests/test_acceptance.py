"""Exit criteria for the package, one test per criterion.

Each test records a PASS/FAIL line that is printed in the pytest terminal
summary.  Runtimes exclude the one-off numba compilation (see conftest).
"""

import time

import numpy as np
import pytest

from mango_attack.attack import AttackConfig, direction_scores, run_gray, run_mango, select_candidates
from mango_attack.harness import (
    TaskSpec,
    compare_variants,
    run_batch,
    run_gradcheck,
    zoo_cosines,
    zoo_quadratic,
)
from mango_attack.loss import AdversarialLoss, inverse_frequency_weights
from mango_attack.models import CountingClassifier
from mango_attack.relaxation import initialize_relaxed, quantize


def test_gradient_correctness(acceptance):
    t0 = time.perf_counter()
    report = run_gradcheck(range(20), h=1e-5, tol=1e-6)
    worst = max(c.value for c in report.cases)
    dt = time.perf_counter() - t0
    terms = {c.name.split("term=")[1] for c in report.cases}
    ok = report.passed and worst < 1e-6 and dt < 10 and terms == {"margin", "fluency", "similarity", "total"}
    acceptance("gradient correctness", ok, f"max rel. error {worst:.2e} < 1e-6 over 20 seeds x 4 terms", dt)
    assert worst < 1e-6
    assert dt < 10


def test_loop_contract(default_task, acceptance):
    t = default_task
    t0 = time.perf_counter()
    bad = []
    for i, (x, y) in enumerate(t.instances):
        res = run_mango(t.classifier, t.reference, x, y, AttackConfig(), vocab=t.vocab, instance=i)
        positions = [r.position for r in res.round_trace]
        if (len(res.round_trace) != len(x) or res.adversarial is None
                or len(res.adversarial) != len(x) or sorted(positions) != list(range(len(x)))):
            bad.append(i)
    dt = time.perf_counter() - t0
    acceptance("loop contract", not bad and dt < 30,
               f"{len(t.instances) - len(bad)}/{len(t.instances)} runs with n unique rounds, fully quantized", dt)
    assert not bad
    assert dt < 30


def test_multistep_beats_one_step(acceptance):
    t0 = time.perf_counter()
    report = compare_variants(TaskSpec(), AttackConfig())
    dt = time.perf_counter() - t0
    frac = report["fraction_mango_le_naive"]
    ok = len(report["pairs"]) == 20 and frac >= 0.7 and report["mean_mango"] < report["mean_naive"] and dt < 120
    acceptance("multi-step beats one-step", ok,
               f"mango <= naive on {frac:.0%}; mean {report['mean_mango']:.3f} vs {report['mean_naive']:.3f}", dt)
    assert len(report["pairs"]) == 20
    assert frac >= 0.7
    assert report["mean_mango"] < report["mean_naive"]
    assert dt < 120


def test_candidate_rule_fidelity(acceptance):
    rng = np.random.default_rng(2024)
    cfg = AttackConfig(lambda_prob=0.5, max_candidates=5, candidate_threshold=0.5)
    t0 = time.perf_counter()
    failures = 0
    for _ in range(1000):
        V = int(rng.integers(2, 30))
        pi = rng.dirichlet(np.ones(V) * rng.uniform(0.1, 2.0))
        grad = rng.standard_normal(V) * rng.uniform(0.01, 10)
        cands = select_candidates(pi, grad, cfg)
        if not cands or len(cands) > 5 or any(c.rescaled_score < 0.5 for c in cands):
            failures += 1
        for lam, key in ((1.0, pi), (0.0, direction_scores(pi, grad))):
            got = [c.token for c in select_candidates(pi, grad, AttackConfig(lambda_prob=lam))]
            if got != sorted(range(V), key=lambda k: (-key[k], k))[: len(got)]:
                failures += 1
    dt = time.perf_counter() - t0
    acceptance("candidate rule fidelity", failures == 0 and dt < 5,
               f"{failures} violations over 1000 random (pi, grad) pairs", dt)
    assert failures == 0
    assert dt < 5


def test_zoo_convergence(acceptance):
    t0 = time.perf_counter()
    cos = float(np.mean(zoo_cosines(range(10), samples=1000, mu=1e-3)))
    est = zoo_quadratic(samples=10_000, mu=1e-4)
    dt = time.perf_counter() - t0
    ok = cos >= 0.9 and abs(est - 2.0) <= 0.1 and dt < 30
    acceptance("zoo estimator convergence", ok, f"mean cosine {cos:.4f} >= 0.9; f'(1) estimate {est:.4f}", dt)
    assert cos >= 0.9
    assert abs(est - 2.0) <= 0.1
    assert dt < 30


def test_gray_black_box_contract(default_task, acceptance):
    t = default_task
    counted = CountingClassifier(t.classifier)
    t0 = time.perf_counter()
    successes = 0
    for i, (x, y) in enumerate(t.instances):
        res = run_gray(counted, t.reference, x, y, AttackConfig.for_variant("gray"), vocab=t.vocab, instance=i)
        successes += bool(res.success) and not res.trivial
    dt = time.perf_counter() - t0
    ok = counted.gradient_queries == 0 and successes >= 1 and dt < 180
    acceptance("gray black-box contract", ok,
               f"{counted.gradient_queries} gradient queries, {counted.forward_queries} forward; "
               f"{successes}/20 successful", dt)
    assert counted.gradient_queries == 0
    assert successes >= 1
    assert dt < 180


def test_gap_trace_sanity(default_task, acceptance):
    t = default_task
    x, y = t.instances[0]
    loss = AdversarialLoss(t.classifier, t.reference, x, y, token_weights=inverse_frequency_weights(x, t.vocab.frequencies))
    t0 = time.perf_counter()
    full = initialize_relaxed(x, 10.0, t.vocab.size)
    for i, k in enumerate(x):
        full = quantize(full, i, (k + i) % t.vocab.size)
    zero = loss.gap(full)
    gaps = [abs(loss.gap(initialize_relaxed(x, C, t.vocab.size))) for C in (2.0, 10.0, 50.0)]
    dt = time.perf_counter() - t0
    ok = zero == 0.0 and gaps[0] > gaps[1] > gaps[2] and dt < 5
    acceptance("gap trace sanity", ok,
               "gap(quantized)=%r; |gap| at C=2,10,50: %.3e > %.3e > %.3e" % (zero, *gaps), dt)
    assert zero == 0.0
    assert gaps[0] > gaps[1] > gaps[2]
    assert dt < 5


def test_reproducibility(tmp_path, acceptance):
    t0 = time.perf_counter()
    same = []
    for name, spec, cfg in [("mango", TaskSpec(), AttackConfig(seed=5)),
                            ("gray", TaskSpec(num_instances=3), AttackConfig.for_variant("gray", seed=5))]:
        run_batch(spec, cfg, tmp_path / name / "a")
        run_batch(spec, cfg, tmp_path / name / "b")
        same.append((tmp_path / name / "a" / "results.jsonl").read_bytes()
                    == (tmp_path / name / "b" / "results.jsonl").read_bytes())
    dt = time.perf_counter() - t0
    acceptance("reproducibility", all(same), "results.jsonl byte-identical across repeated runs (mango, gray)", dt)
    assert all(same)
