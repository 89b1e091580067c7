"""Dense reference attention and the tiled block-sparse kernel.

The sparse kernel walks kept (query block, key block) pairs with an online
softmax: a running row max m, a running exponential sum l, and an output
accumulator that is rescaled whenever m grows. Skipped blocks cost nothing,
which an optional counter can verify. The backward pass recomputes each
kept block's probabilities from the saved log-sum-exp instead of storing
the full attention matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .masker import BlockMask, SparsityConfig, hybrid_mask, pooled_map
from .numerics import as_tensor, ensure_finite


@dataclass(frozen=True)
class AttentionOutput:
    out: np.ndarray
    lse: np.ndarray
    mask_used: BlockMask


@dataclass(frozen=True)
class AttentionGrads:
    dq: np.ndarray
    dk: np.ndarray
    dv: np.ndarray


class BlockCounter:
    """Counts computed (query block, key block) pairs."""

    def __init__(self):
        self.count = 0

    def hit(self, i: int, j: int) -> None:
        self.count += 1


def full_mask(n: int) -> BlockMask:
    return BlockMask(np.ones((1, 1), dtype=bool), b_q=n, b_kv=n, n_tokens=n)


def _check_qkv(q, k, v):
    q = as_tensor(q, rank=2)
    k = as_tensor(k, rank=2)
    v = as_tensor(v, rank=2)
    if not (q.shape == k.shape == v.shape):
        raise ValueError(f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    ensure_finite(q, "q")
    ensure_finite(k, "k")
    ensure_finite(v, "v")
    return q, k, v


def dense_attention(q, k, v) -> AttentionOutput:
    q, k, v = _check_qkv(q, k, v)
    n, d = q.shape
    s = (q @ k.T) / math.sqrt(d)
    m = s.max(axis=1)
    e = np.exp(s - m[:, None])
    l = e.sum(axis=1)
    out = (e / l[:, None]) @ v
    return AttentionOutput(out=out, lse=m + np.log(l), mask_used=full_mask(n))


def sparse_attention_with_mask(
    q, k, v, bm: BlockMask, counter: BlockCounter | None = None, _block_order=None
) -> AttentionOutput:
    """Tiled attention restricted to bm's kept blocks.

    _block_order is a test hook: given (i, kept_columns) it may return the
    kept columns in a different visit order. The contract is that the result
    does not depend on it.
    """
    q, k, v = _check_qkv(q, k, v)
    n, d = q.shape
    if bm.n_tokens != n:
        raise ValueError(f"mask built for {bm.n_tokens} tokens, inputs have {n}")
    scale = 1.0 / math.sqrt(d)
    b_q, b_kv = bm.b_q, bm.b_kv

    out = np.empty((n, d))
    lse = np.empty(n)
    for i in range(bm.keep.shape[0]):
        qi = q[i * b_q : (i + 1) * b_q]
        rows = qi.shape[0]
        m = np.full(rows, -np.inf)
        l = np.zeros(rows)
        acc = np.zeros((rows, d))
        kept = np.flatnonzero(bm.keep[i])
        if _block_order is not None:
            kept = _block_order(i, kept)
        for j in kept:
            kj = k[j * b_kv : (j + 1) * b_kv]
            vj = v[j * b_kv : (j + 1) * b_kv]
            if counter is not None:
                counter.hit(i, int(j))
            s_ij = (qi @ kj.T) * scale
            m_new = np.maximum(m, s_ij.max(axis=1))
            alpha = np.exp(m - m_new)  # exp(-inf - finite) = 0 on the first block
            p_ij = np.exp(s_ij - m_new[:, None])
            l = alpha * l + p_ij.sum(axis=1)
            acc = alpha[:, None] * acc + p_ij @ vj
            m = m_new
        out[i * b_q : (i + 1) * b_q] = acc / l[:, None]
        lse[i * b_q : (i + 1) * b_q] = m + np.log(l)
    return AttentionOutput(out=out, lse=lse, mask_used=bm)


def sparse_attention(
    q, k, v, cfg: SparsityConfig, counter: BlockCounter | None = None
) -> AttentionOutput:
    """Derive the hybrid mask from the current q/k, then run the kernel.

    The mask is rebuilt on every call; nothing is cached across steps.
    """
    pm = pooled_map(q, k, cfg)
    return sparse_attention_with_mask(q, k, v, hybrid_mask(pm, cfg), counter=counter)


def attention_backward(q, k, v, bm: BlockMask, d_out) -> AttentionGrads:
    """Gradients of the masked attention output, mask held constant.

    Recomputes each kept block's probabilities from the forward lse; dropped
    blocks contribute exactly zero to every gradient.
    """
    q, k, v = _check_qkv(q, k, v)
    d_out = as_tensor(d_out, rank=2)
    if d_out.shape != q.shape:
        raise ValueError(f"d_out shape {d_out.shape} != q shape {q.shape}")
    ensure_finite(d_out, "d_out")

    fwd = sparse_attention_with_mask(q, k, v, bm)
    n, d = q.shape
    scale = 1.0 / math.sqrt(d)
    b_q, b_kv = bm.b_q, bm.b_kv

    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    # per-row sum of d_out * out, the softmax-jacobian contraction constant
    delta = (d_out * fwd.out).sum(axis=1)

    for i in range(bm.keep.shape[0]):
        sl_q = slice(i * b_q, (i + 1) * b_q)
        qi = q[sl_q]
        doi = d_out[sl_q]
        lse_i = fwd.lse[sl_q]
        delta_i = delta[sl_q]
        for j in np.flatnonzero(bm.keep[i]):
            sl_k = slice(j * b_kv, (j + 1) * b_kv)
            kj = k[sl_k]
            vj = v[sl_k]
            p_ij = np.exp((qi @ kj.T) * scale - lse_i[:, None])
            dv[sl_k] += p_ij.T @ doi
            ds = p_ij * (doi @ vj.T - delta_i[:, None])
            dq[sl_q] += (ds @ kj) * scale
            dk[sl_k] += (ds.T @ qi) * scale
    return AttentionGrads(dq=dq, dk=dk, dv=dv)
