"""Hot numeric kernels, compiled with numba when available.

Every kernel exists twice: a loop-style ``@njit`` version and a vectorised
numpy version with identical semantics.  The numba path is used by default;
set ``MANGO_NO_NUMBA=1`` in the environment (before import) to force the
numpy path.  Both sets stay importable as ``numba_kernels`` / ``numpy_kernels``
so they can be cross-checked and benchmarked against each other.
"""

import os
import types

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

TINY = 1e-12


# --------------------------------------------------------------------------
# numpy reference path
# --------------------------------------------------------------------------


def _softmax_rows_np(theta, support):
    z = np.where(support, theta, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    ez = np.where(support, np.exp(z), 0.0)
    return ez / ez.sum(axis=1, keepdims=True)


def _softmax_rows_vjp_np(p, dp):
    return p * (dp - np.sum(p * dp, axis=1, keepdims=True))


def _row_entropy_np(p):
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, -p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return np.maximum(terms.sum(axis=1), 0.0)


def _greedy_match_np(v, vp):
    sims = v @ vp.T
    idx = np.argmax(sims, axis=1)  # first occurrence on ties
    return sims[np.arange(len(v)), idx], idx


def _direction_scores_np(pi, grad):
    gnorm = np.sqrt(np.dot(grad, grad))
    qnorm = np.sqrt(np.maximum(np.dot(pi, pi) - 2.0 * pi + 1.0, 0.0))
    if gnorm < TINY:
        return np.zeros_like(pi)
    dot = -grad + np.dot(pi, grad)  # q_k . (-grad)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(qnorm < TINY, 0.0, dot / (qnorm * gnorm))
    return np.clip(d, -1.0, 1.0)


def _adam_update_np(theta, grad, m, v, vmax, rows, t, lr, beta1, beta2, eps, amsgrad):
    m[rows] = beta1 * m[rows] + (1.0 - beta1) * grad[rows]
    v[rows] = beta2 * v[rows] + (1.0 - beta2) * grad[rows] ** 2
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    if amsgrad:
        vmax[rows] = np.maximum(vmax[rows], v[rows])
        denom = np.sqrt(vmax[rows]) / np.sqrt(bc2) + eps
    else:
        denom = np.sqrt(v[rows] / bc2) + eps
    theta[rows] -= lr * (m[rows] / bc1) / denom


def _prefix_mean_np(e):
    n = e.shape[0]
    c = np.zeros_like(e)
    if n > 1:
        c[1:] = np.cumsum(e, axis=0)[:-1] / np.arange(1, n)[:, None]
    return c


def _prefix_mean_vjp_np(dc):
    n = dc.shape[0]
    de = np.zeros_like(dc)
    if n > 1:
        scaled = dc[1:] / np.arange(1, n)[:, None]
        # de[j] = sum_{i > j} dc[i] / i
        de[:-1] = np.cumsum(scaled[::-1], axis=0)[::-1]
    return de


numpy_kernels = types.SimpleNamespace(
    softmax_rows=_softmax_rows_np,
    softmax_rows_vjp=_softmax_rows_vjp_np,
    row_entropy=_row_entropy_np,
    greedy_match=_greedy_match_np,
    direction_scores=_direction_scores_np,
    adam_update=_adam_update_np,
    prefix_mean=_prefix_mean_np,
    prefix_mean_vjp=_prefix_mean_vjp_np,
)


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _softmax_rows_nb(theta, support):
        n, V = theta.shape
        out = np.zeros((n, V))
        for i in range(n):
            mx = -np.inf
            for j in range(V):
                if support[i, j] and theta[i, j] > mx:
                    mx = theta[i, j]
            s = 0.0
            for j in range(V):
                if support[i, j]:
                    out[i, j] = np.exp(theta[i, j] - mx)
                    s += out[i, j]
            for j in range(V):
                out[i, j] /= s
        return out

    @njit(cache=True)
    def _softmax_rows_vjp_nb(p, dp):
        n, V = p.shape
        out = np.empty((n, V))
        for i in range(n):
            inner = 0.0
            for j in range(V):
                inner += p[i, j] * dp[i, j]
            for j in range(V):
                out[i, j] = p[i, j] * (dp[i, j] - inner)
        return out

    @njit(cache=True)
    def _row_entropy_nb(p):
        n, V = p.shape
        out = np.zeros(n)
        for i in range(n):
            h = 0.0
            for j in range(V):
                if p[i, j] > 0.0:
                    h -= p[i, j] * np.log(p[i, j])
            out[i] = h if h > 0.0 else 0.0
        return out

    @njit(cache=True)
    def _greedy_match_nb(v, vp):
        n = v.shape[0]
        m = vp.shape[0]
        best = np.empty(n)
        idx = np.zeros(n, dtype=np.int64)
        for i in range(n):
            b = -np.inf
            for j in range(m):
                s = 0.0
                for k in range(v.shape[1]):
                    s += v[i, k] * vp[j, k]
                if s > b:
                    b = s
                    idx[i] = j
            best[i] = b
        return best, idx

    @njit(cache=True)
    def _direction_scores_nb(pi, grad):
        V = pi.shape[0]
        out = np.zeros(V)
        gg = 0.0
        pp = 0.0
        pg = 0.0
        for j in range(V):
            gg += grad[j] * grad[j]
            pp += pi[j] * pi[j]
            pg += pi[j] * grad[j]
        gnorm = np.sqrt(gg)
        if gnorm < TINY:
            return out
        for k in range(V):
            q2 = pp - 2.0 * pi[k] + 1.0
            qnorm = np.sqrt(q2) if q2 > 0.0 else 0.0
            if qnorm < TINY:
                continue
            d = (pg - grad[k]) / (qnorm * gnorm)
            out[k] = min(1.0, max(-1.0, d))
        return out

    @njit(cache=True)
    def _adam_update_nb(theta, grad, m, v, vmax, rows, t, lr, beta1, beta2, eps, amsgrad):
        n, V = theta.shape
        bc1 = 1.0 - beta1**t
        bc2 = 1.0 - beta2**t
        for i in range(n):
            if not rows[i]:
                continue
            for j in range(V):
                g = grad[i, j]
                m[i, j] = beta1 * m[i, j] + (1.0 - beta1) * g
                v[i, j] = beta2 * v[i, j] + (1.0 - beta2) * g * g
                if amsgrad:
                    if v[i, j] > vmax[i, j]:
                        vmax[i, j] = v[i, j]
                    denom = np.sqrt(vmax[i, j]) / np.sqrt(bc2) + eps
                else:
                    denom = np.sqrt(v[i, j] / bc2) + eps
                theta[i, j] -= lr * (m[i, j] / bc1) / denom

    @njit(cache=True)
    def _prefix_mean_nb(e):
        n, d = e.shape
        c = np.zeros((n, d))
        acc = np.zeros(d)
        for i in range(1, n):
            for k in range(d):
                acc[k] += e[i - 1, k]
                c[i, k] = acc[k] / i
        return c

    @njit(cache=True)
    def _prefix_mean_vjp_nb(dc):
        n, d = dc.shape
        de = np.zeros((n, d))
        acc = np.zeros(d)
        for j in range(n - 2, -1, -1):
            for k in range(d):
                acc[k] += dc[j + 1, k] / (j + 1)
                de[j, k] = acc[k]
        return de

    numba_kernels = types.SimpleNamespace(
        softmax_rows=_softmax_rows_nb,
        softmax_rows_vjp=_softmax_rows_vjp_nb,
        row_entropy=_row_entropy_nb,
        greedy_match=_greedy_match_nb,
        direction_scores=_direction_scores_nb,
        adam_update=_adam_update_nb,
        prefix_mean=_prefix_mean_nb,
        prefix_mean_vjp=_prefix_mean_vjp_nb,
    )
else:  # pragma: no cover
    numba_kernels = None


def _use_numba():
    flag = os.environ.get("MANGO_NO_NUMBA", "").strip().lower()
    return HAVE_NUMBA and flag not in ("1", "true", "yes", "on")


if _use_numba():
    BACKEND = "numba"
    K = numba_kernels
else:
    BACKEND = "numpy"
    K = numpy_kernels


def warmup():
    """Trigger JIT compilation of every kernel on tiny inputs."""
    theta = np.zeros((2, 3))
    support = np.ones((2, 3), dtype=np.bool_)
    p = K.softmax_rows(theta, support)
    K.softmax_rows_vjp(p, p)
    K.row_entropy(p)
    K.greedy_match(p, p)
    K.direction_scores(p[0], p[1])
    K.adam_update(theta, p, np.zeros_like(p), np.zeros_like(p), np.zeros_like(p),
                  np.ones(2, dtype=np.bool_), 1, 0.1, 0.9, 0.999, 1e-8, True)
    K.prefix_mean(p)
    K.prefix_mean_vjp(p)
