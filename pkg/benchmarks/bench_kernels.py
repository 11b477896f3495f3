"""Compare the numba kernels against the numpy fallback.

    python benchmarks/bench_kernels.py            # kernel timings + end-to-end attacks
    python benchmarks/bench_kernels.py --no-e2e   # kernel timings only

The end-to-end part runs a small mango batch once per backend in a fresh
interpreter (MANGO_NO_NUMBA selects the backend at import time).
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from mango_attack import _kernels

E2E_SNIPPET = """
import time
from mango_attack import _kernels
from mango_attack.attack import AttackConfig, run_mango
from mango_attack.harness import TaskSpec, build_task
_kernels.warmup()
t = build_task(TaskSpec(vocab_size={V}, seq_len={n}, num_instances={N}))
t0 = time.perf_counter()
for i, (x, y) in enumerate(t.instances):
    run_mango(t.classifier, t.reference, x, y, AttackConfig(), vocab=t.vocab, instance=i)
print(_kernels.BACKEND, time.perf_counter() - t0)
"""


def timeit(fn, repeat):
    fn()  # JIT / cache warm
    best = np.inf
    for _ in range(5):
        t0 = time.perf_counter()
        for _ in range(repeat):
            fn()
        best = min(best, (time.perf_counter() - t0) / repeat)
    return best


def kernel_cases(n, V, rng):
    theta = rng.standard_normal((n, V))
    support = np.ones((n, V), dtype=np.bool_)
    p = _kernels.numpy_kernels.softmax_rows(theta, support)
    dp = rng.standard_normal((n, V))
    v = rng.standard_normal((n, 16))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    e = rng.standard_normal((n, 16))
    rows = np.ones(n, dtype=np.bool_)

    def adam(k):
        th, m, s, smax = theta.copy(), np.zeros_like(theta), np.zeros_like(theta), np.zeros_like(theta)
        return lambda: k.adam_update(th, dp, m, s, smax, rows, 1, 0.3, 0.9, 0.999, 1e-8, True)

    return {
        "softmax_rows": lambda k: (lambda: k.softmax_rows(theta, support)),
        "softmax_rows_vjp": lambda k: (lambda: k.softmax_rows_vjp(p, dp)),
        "row_entropy": lambda k: (lambda: k.row_entropy(p)),
        "greedy_match": lambda k: (lambda: k.greedy_match(v, v)),
        "direction_scores": lambda k: (lambda: k.direction_scores(p[0], dp[0])),
        "adam_update": adam,
        "prefix_mean": lambda k: (lambda: k.prefix_mean(e)),
        "prefix_mean_vjp": lambda k: (lambda: k.prefix_mean_vjp(e)),
    }


def bench_kernels(sizes, repeat):
    if _kernels.numba_kernels is None:
        print("numba not importable; nothing to compare")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'n x |V|':>12}{'numpy (us)':>14}{'numba (us)':>14}{'speedup':>10}")
    for n, V in sizes:
        for name, make in kernel_cases(n, V, rng).items():
            t_np = timeit(make(_kernels.numpy_kernels), repeat)
            t_nb = timeit(make(_kernels.numba_kernels), repeat)
            print(f"{name:<18}{f'{n}x{V}':>12}{t_np * 1e6:>14.2f}{t_nb * 1e6:>14.2f}{t_np / t_nb:>10.2f}")


def bench_e2e(V, n, N):
    code = E2E_SNIPPET.format(V=V, n=n, N=N)
    print(f"\nend-to-end mango, {N} instances, |V|={V}, n={n}")
    for flag in ("0", "1"):
        env = dict(os.environ, MANGO_NO_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True,
                             text=True, check=True).stdout.split()
        print(f"  {out[0]:<6} {float(out[1]):8.2f} s")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--no-e2e", action="store_true")
    ap.add_argument("--instances", type=int, default=5)
    args = ap.parse_args()
    bench_kernels([(6, 12), (32, 256), (128, 2048)], args.repeat)
    if not args.no_e2e:
        bench_e2e(64, 10, args.instances)


if __name__ == "__main__":
    main()
