"""Hot inner loops, compiled with numba when available.

Every kernel has a pure-numpy twin with the same signature.  The numba path is
used unless numba is missing or ``TAGLM_DISABLE_NUMBA`` is set to a truthy
value before import.  Both paths are exercised by the test-suite and compared
in ``benchmarks/bench_kernels.py``.
"""
import os

import numpy as np

try:
    import numba
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("TAGLM_DISABLE_NUMBA", "").lower() not in (
    "1", "true", "yes", "on")


def _jit(func):
    if HAVE_NUMBA:
        return numba.njit(cache=True)(func)
    return func


# --------------------------------------------------------------------------
# numba kernels

@_jit
def _segment_mean_nb(x, indptr, indices):
    n = indptr.shape[0] - 1
    d = x.shape[1]
    out = np.zeros((n, d))
    for i in range(n):
        lo = indptr[i]
        hi = indptr[i + 1]
        if hi == lo:
            continue
        inv = 1.0 / (hi - lo)
        for p in range(lo, hi):
            j = indices[p]
            for k in range(d):
                out[i, k] += x[j, k]
        for k in range(d):
            out[i, k] *= inv
    return out


@_jit
def _segment_mean_grad_nb(grad_out, indptr, indices, n_src):
    n = indptr.shape[0] - 1
    d = grad_out.shape[1]
    gx = np.zeros((n_src, d))
    for i in range(n):
        lo = indptr[i]
        hi = indptr[i + 1]
        if hi == lo:
            continue
        inv = 1.0 / (hi - lo)
        for p in range(lo, hi):
            j = indices[p]
            for k in range(d):
                gx[j, k] += grad_out[i, k] * inv
    return gx


@_jit
def _scatter_add_rows_nb(target, idx, rows):
    for r in range(idx.shape[0]):
        t = idx[r]
        for k in range(rows.shape[1]):
            target[t, k] += rows[r, k]
    return target


@_jit
def _next_frontier_nb(indptr, indices, frontier, seen):
    count = 0
    buf = np.empty(indices.shape[0] + 1, dtype=np.int64)
    for f in range(frontier.shape[0]):
        u = frontier[f]
        for p in range(indptr[u], indptr[u + 1]):
            v = indices[p]
            if not seen[v]:
                seen[v] = True
                buf[count] = v
                count += 1
    out = buf[:count].copy()
    out.sort()
    return out


@_jit
def _xent_rows_nb(logits, targets):
    n, v = logits.shape
    losses = np.empty(n)
    probs = np.empty((n, v))
    for i in range(n):
        m = logits[i, 0]
        for j in range(1, v):
            if logits[i, j] > m:
                m = logits[i, j]
        s = 0.0
        for j in range(v):
            e = np.exp(logits[i, j] - m)
            probs[i, j] = e
            s += e
        for j in range(v):
            probs[i, j] /= s
        losses[i] = m + np.log(s) - logits[i, targets[i]]
    return losses, probs


@_jit
def _layer_norm_nb(x, eps):
    n, d = x.shape
    xhat = np.empty((n, d))
    rstd = np.empty(n)
    for i in range(n):
        mu = 0.0
        for k in range(d):
            mu += x[i, k]
        mu /= d
        var = 0.0
        for k in range(d):
            c = x[i, k] - mu
            var += c * c
        var /= d
        r = 1.0 / np.sqrt(var + eps)
        rstd[i] = r
        for k in range(d):
            xhat[i, k] = (x[i, k] - mu) * r
    return xhat, rstd


@_jit
def _layer_norm_grad_nb(gxhat, xhat, rstd):
    n, d = xhat.shape
    gx = np.empty((n, d))
    for i in range(n):
        a = 0.0
        b = 0.0
        for k in range(d):
            a += gxhat[i, k]
            b += gxhat[i, k] * xhat[i, k]
        a /= d
        b /= d
        for k in range(d):
            gx[i, k] = rstd[i] * (gxhat[i, k] - a - xhat[i, k] * b)
    return gx


# --------------------------------------------------------------------------
# numpy twins

def _segment_mean_np(x, indptr, indices):
    n = indptr.shape[0] - 1
    deg = np.diff(indptr)
    rows = np.repeat(np.arange(n), deg)
    out = np.zeros((n, x.shape[1]))
    np.add.at(out, rows, x[indices])
    nz = deg > 0
    out[nz] /= deg[nz, None]
    return out


def _segment_mean_grad_np(grad_out, indptr, indices, n_src):
    n = indptr.shape[0] - 1
    deg = np.diff(indptr)
    rows = np.repeat(np.arange(n), deg)
    gx = np.zeros((n_src, grad_out.shape[1]))
    if rows.size:
        np.add.at(gx, indices, grad_out[rows] / deg[rows, None])
    return gx


def _scatter_add_rows_np(target, idx, rows):
    np.add.at(target, idx, rows)
    return target


def _next_frontier_np(indptr, indices, frontier, seen):
    if frontier.size == 0:
        return np.empty(0, dtype=np.int64)
    parts = [indices[indptr[u]:indptr[u + 1]] for u in frontier]
    cand = np.unique(np.concatenate(parts)) if parts else np.empty(0, dtype=np.int64)
    cand = cand[~seen[cand]].astype(np.int64)
    seen[cand] = True
    return cand


def _xent_rows_np(logits, targets):
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    s = e.sum(axis=1, keepdims=True)
    probs = e / s
    losses = (m[:, 0] + np.log(s[:, 0])) - logits[np.arange(len(targets)), targets]
    return losses, probs


def _layer_norm_np(x, eps):
    mu = x.mean(axis=1, keepdims=True)
    c = x - mu
    var = (c * c).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return c * rstd, rstd[:, 0]


def _layer_norm_grad_np(gxhat, xhat, rstd):
    a = gxhat.mean(axis=1, keepdims=True)
    b = (gxhat * xhat).mean(axis=1, keepdims=True)
    return rstd[:, None] * (gxhat - a - xhat * b)


NUMPY_KERNELS = {
    "segment_mean": _segment_mean_np,
    "segment_mean_grad": _segment_mean_grad_np,
    "scatter_add_rows": _scatter_add_rows_np,
    "next_frontier": _next_frontier_np,
    "xent_rows": _xent_rows_np,
    "layer_norm": _layer_norm_np,
    "layer_norm_grad": _layer_norm_grad_np,
}

# numpy's SIMD exp beats the compiled loop for softmax rows, so the dispatch
# table keeps the numpy version there; _xent_rows_nb stays for benchmarking.
COMPILED_KERNELS = {
    "segment_mean": _segment_mean_nb,
    "segment_mean_grad": _segment_mean_grad_nb,
    "scatter_add_rows": _scatter_add_rows_nb,
    "next_frontier": _next_frontier_nb,
    "xent_rows": _xent_rows_nb,
    "layer_norm": _layer_norm_nb,
    "layer_norm_grad": _layer_norm_grad_nb,
}


NUMBA_KERNELS = dict(COMPILED_KERNELS, xent_rows=_xent_rows_np)


def backend():
    return "numba" if USE_NUMBA else "numpy"


def _pick(name):
    return (NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS)[name]


def segment_mean(x, indptr, indices):
    """Mean of ``x`` rows over each CSR segment; empty segments give zeros."""
    return _pick("segment_mean")(np.ascontiguousarray(x, dtype=np.float64), indptr, indices)


def segment_mean_grad(grad_out, indptr, indices, n_src):
    return _pick("segment_mean_grad")(np.ascontiguousarray(grad_out), indptr, indices, n_src)


def scatter_add_rows(target, idx, rows):
    """``target[idx[r]] += rows[r]`` with repeated indices accumulated, in place."""
    return _pick("scatter_add_rows")(target, np.asarray(idx, dtype=np.int64),
                                     np.ascontiguousarray(rows, dtype=np.float64))


def next_frontier(indptr, indices, frontier, seen):
    """Unvisited neighbours of ``frontier`` in ascending order; marks them seen."""
    return _pick("next_frontier")(indptr, indices, np.asarray(frontier, dtype=np.int64), seen)


def xent_rows(logits, targets):
    """Per-row cross-entropy and softmax probabilities."""
    return _pick("xent_rows")(np.ascontiguousarray(logits, dtype=np.float64),
                              np.asarray(targets, dtype=np.int64))


def layer_norm(x, eps):
    return _pick("layer_norm")(np.ascontiguousarray(x, dtype=np.float64), eps)


def layer_norm_grad(gxhat, xhat, rstd):
    return _pick("layer_norm_grad")(np.ascontiguousarray(gxhat), xhat, rstd)
