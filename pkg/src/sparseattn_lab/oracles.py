"""Brute-force reference implementations, used only by tests.

Everything here is written as plain loops over explicit intermediate
matrices. Nothing is tiled, nothing skips work, and no code is shared with
the production kernels. Keep it that way: these functions are the ground
truth the fast paths are judged against, so auditability beats speed.
"""

from __future__ import annotations

import math

import numpy as np

# stands in for -inf so the arithmetic stays finite; the induced softmax
# deviation is far below every tolerance used in the tests
NEG_INF = -1e30


def oracle_dense_attention(q, k, v) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    n, d = q.shape
    scale = 1.0 / math.sqrt(d)
    out = np.zeros((n, v.shape[1]))
    for i in range(n):
        s = np.array([float(q[i] @ k[j]) * scale for j in range(n)])
        e = np.exp(s - s.max())
        p = e / e.sum()
        for j in range(n):
            out[i] += p[j] * v[j]
    return out


def oracle_masked_attention(q, k, v, token_mask) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    token_mask = np.asarray(token_mask)
    n, d = q.shape
    scale = 1.0 / math.sqrt(d)
    out = np.zeros((n, v.shape[1]))
    for i in range(n):
        if not np.any(token_mask[i] != 0):
            raise ValueError(f"row {i} of token_mask keeps nothing")
        s = np.array(
            [float(q[i] @ k[j]) * scale if token_mask[i, j] != 0 else NEG_INF for j in range(n)]
        )
        e = np.exp(s - s.max())
        p = e / e.sum()
        for j in range(n):
            out[i] += p[j] * v[j]
    return out


def oracle_fd_grad(loss_fn, params, h: float):
    """Central-difference gradient of loss_fn w.r.t. each array in params."""
    grads = []
    for p in params:
        g = np.zeros_like(p, dtype=np.float64)
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        for idx in range(flat_p.size):
            orig = flat_p[idx]
            flat_p[idx] = orig + h
            hi = loss_fn()
            flat_p[idx] = orig - h
            lo = loss_fn()
            flat_p[idx] = orig
            flat_g[idx] = (hi - lo) / (2.0 * h)
        grads.append(g)
    return grads


def oracle_top_p_count(row, p_frac: float, slack: float = 1e-12) -> int:
    """Exhaustive search over all prefixes of the descending sort: the
    shortest whose retained mass reaches p_frac."""
    row = np.asarray(row, dtype=np.float64)
    order = np.argsort(-row, kind="stable")
    for length in range(1, len(row) + 1):
        if float(row[order[:length]].sum()) >= p_frac - slack:
            return length
    return len(row)
