"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Set ``GEOMTL_NUMBA=0`` in the environment to force the numpy path. The
choice is made once at import time; both variants stay importable under
``<name>_jit`` / ``<name>_numpy`` so tests and the benchmark can compare them.
"""

import os

import numpy as np

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    _HAVE_NUMBA = False

USE_NUMBA = _HAVE_NUMBA and os.environ.get("GEOMTL_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


def _njit(fn):
    if not _HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# ---------------------------------------------------------------- Adam update

def _adam_update_loop(param, grad, m, v, lr, beta1, beta2, eps, t):
    # flat float64 views, updated in place
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for i in range(param.size):
        g = grad[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * g
        v[i] = beta2 * v[i] + (1.0 - beta2) * (g * g)
        mhat = m[i] / bc1
        vhat = v[i] / bc2
        param[i] -= lr * mhat / (np.sqrt(vhat) + eps)


def adam_update_numpy(param, grad, m, v, lr, beta1, beta2, eps, t):
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    param -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


adam_update_jit = _njit(_adam_update_loop)


# ------------------------------------------------------ batch normalization

def _bn_forward_loop(x, gamma, beta, eps):
    n, d = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    mean = np.zeros(d)
    var = np.zeros(d)
    inv_std = np.empty(d)
    for j in range(d):
        s = 0.0
        for i in range(n):
            s += x[i, j]
        mu = s / n
        s2 = 0.0
        for i in range(n):
            c = x[i, j] - mu
            s2 += c * c
        sig2 = s2 / n
        istd = 1.0 / np.sqrt(sig2 + eps)
        mean[j] = mu
        var[j] = sig2
        inv_std[j] = istd
        for i in range(n):
            xh = (x[i, j] - mu) * istd
            xhat[i, j] = xh
            y[i, j] = gamma[j] * xh + beta[j]
    return y, xhat, mean, var, inv_std


def bn_forward_numpy(x, gamma, beta, eps):
    mean = x.mean(axis=0)
    centered = x - mean
    var = (centered * centered).mean(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    return gamma * xhat + beta, xhat, mean, var, inv_std


def _bn_backward_loop(dy, xhat, gamma, inv_std):
    n, d = dy.shape
    dx = np.empty_like(dy)
    dgamma = np.zeros(d)
    dbeta = np.zeros(d)
    for j in range(d):
        sb = 0.0
        sg = 0.0
        for i in range(n):
            sb += dy[i, j]
            sg += dy[i, j] * xhat[i, j]
        dbeta[j] = sb
        dgamma[j] = sg
        k = gamma[j] * inv_std[j] / n
        for i in range(n):
            dx[i, j] = k * (n * dy[i, j] - sb - xhat[i, j] * sg)
    return dx, dgamma, dbeta


def bn_backward_numpy(dy, xhat, gamma, inv_std):
    n = dy.shape[0]
    dbeta = dy.sum(axis=0)
    dgamma = (dy * xhat).sum(axis=0)
    dx = (gamma * inv_std / n) * (n * dy - dbeta - xhat * dgamma)
    return dx, dgamma, dbeta


bn_forward_jit = _njit(_bn_forward_loop)
bn_backward_jit = _njit(_bn_backward_loop)


# ------------------------------------------------------- average precision

def _ap_ranked_loop(ranked_labels):
    # labels already in rank order (best first)
    n_pos = 0
    for i in range(ranked_labels.size):
        if ranked_labels[i] != 0:
            n_pos += 1
    total = 0.0
    hits = 0
    for i in range(ranked_labels.size):
        if ranked_labels[i] != 0:
            hits += 1
            total += hits / (i + 1.0)
    return total / n_pos


def ap_ranked_numpy(ranked_labels):
    hit = ranked_labels != 0
    ranks = np.flatnonzero(hit) + 1.0
    precisions = np.arange(1, ranks.size + 1) / ranks
    total = 0.0
    for p in precisions:  # left-to-right, same order as the loop kernel
        total += p
    return total / ranks.size


ap_ranked_jit = _njit(_ap_ranked_loop)


# ---------------------------------------------------------------- histogram

def _hist_loop(scores, edges):
    n_bins = edges.size - 1
    counts = np.zeros(n_bins, dtype=np.int64)
    for i in range(scores.size):
        b = np.searchsorted(edges, scores[i], side="right") - 1
        if b >= n_bins:
            b = n_bins - 1  # right-inclusive last bin
        elif b < 0:
            b = 0
        counts[b] += 1
    return counts


def hist_numpy(scores, edges):
    n_bins = edges.size - 1
    idx = np.clip(np.searchsorted(edges, scores, side="right") - 1, 0, n_bins - 1)
    return np.bincount(idx, minlength=n_bins).astype(np.int64)


hist_jit = _njit(_hist_loop)


if USE_NUMBA:
    adam_update = adam_update_jit
    bn_forward = bn_forward_jit
    bn_backward = bn_backward_jit
    ap_ranked = ap_ranked_jit
    hist_counts = hist_jit
else:
    adam_update = adam_update_numpy
    bn_forward = bn_forward_numpy
    bn_backward = bn_backward_numpy
    ap_ranked = ap_ranked_numpy
    hist_counts = hist_numpy


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
