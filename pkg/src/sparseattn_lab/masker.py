"""Block-pooled attention maps and Top-k / Top-p / hybrid block masks.

Masks are chosen per query block from a pooled score map: pool Q and K by
block means, take row softmax of the pooled scores, then keep either the K
largest columns (top-k), the minimal descending prefix reaching a mass
threshold (top-p), or the union of both (hybrid). Ties always break toward
the lower column index so masks are bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import (
    as_tensor,
    block_mean_pool,
    ensure_finite,
    format_float,
    num_blocks,
    softmax_rows,
)

# absorbs cumulative-sum rounding when a prefix lands exactly on p_frac
P_SLACK = 1e-12


@dataclass(frozen=True)
class SparsityConfig:
    k_frac: float
    p_frac: float
    b_q: int
    b_kv: int

    def __post_init__(self):
        if not (0.0 <= self.k_frac <= 1.0):
            raise ValueError(f"k_frac out of [0,1]: {self.k_frac}")
        if not (0.0 <= self.p_frac <= 1.0):
            raise ValueError(f"p_frac out of [0,1]: {self.p_frac}")
        if self.b_q < 1 or self.b_kv < 1:
            raise ValueError(f"block sizes must be >= 1: b_q={self.b_q}, b_kv={self.b_kv}")


@dataclass(frozen=True)
class PooledMap:
    """Row-stochastic block-level attention map plus the grid geometry."""

    probs: np.ndarray
    b_q: int
    b_kv: int
    n_tokens: int

    def __post_init__(self):
        probs = as_tensor(self.probs, rank=2)
        probs.flags.writeable = False
        object.__setattr__(self, "probs", probs)
        ensure_finite(probs, "pooled map")
        row_sums = probs.sum(axis=1)
        if np.any(np.abs(row_sums - 1.0) > 1e-12):
            raise ValueError("pooled map rows must sum to 1 within 1e-12")


@dataclass(frozen=True)
class BlockMask:
    keep: np.ndarray
    b_q: int
    b_kv: int
    n_tokens: int

    def __post_init__(self):
        keep = np.ascontiguousarray(self.keep, dtype=bool)
        keep.flags.writeable = False
        object.__setattr__(self, "keep", keep)
        if keep.ndim != 2:
            raise ValueError(f"keep must be rank 2, got shape {keep.shape}")
        if not np.all(keep.any(axis=1)):
            raise ValueError("every query block must keep at least one key block")
        t_m = num_blocks(self.n_tokens, self.b_q)
        t_n = num_blocks(self.n_tokens, self.b_kv)
        if keep.shape != (t_m, t_n):
            raise ValueError(
                f"keep shape {keep.shape} does not match grid "
                f"({t_m}, {t_n}) for n_tokens={self.n_tokens}"
            )

    def sparsity(self) -> float:
        return 1.0 - self.keep.sum() / self.keep.size

    def kept_blocks(self) -> int:
        return int(self.keep.sum())

    def __or__(self, other: "BlockMask") -> "BlockMask":
        if (self.b_q, self.b_kv, self.n_tokens) != (other.b_q, other.b_kv, other.n_tokens):
            raise ValueError("mask geometry mismatch")
        return BlockMask(self.keep | other.keep, self.b_q, self.b_kv, self.n_tokens)


def pooled_map(q: np.ndarray, k: np.ndarray, cfg: SparsityConfig) -> PooledMap:
    q = as_tensor(q, rank=2)
    k = as_tensor(k, rank=2)
    if q.shape[1] != k.shape[1]:
        raise ValueError(f"q/k feature dims differ: {q.shape} vs {k.shape}")
    if q.shape[0] != k.shape[0]:
        raise ValueError(f"q/k token counts differ: {q.shape} vs {k.shape}")
    qb = block_mean_pool(q, cfg.b_q)
    kb = block_mean_pool(k, cfg.b_kv)
    scores = (qb @ kb.T) / math.sqrt(q.shape[1])
    return PooledMap(softmax_rows(scores), cfg.b_q, cfg.b_kv, q.shape[0])


def _descending_order(row: np.ndarray) -> np.ndarray:
    # stable sort on negated values: ties resolve to the lower column index
    return np.argsort(-row, kind="stable")


def top_k_count(k_frac: float, t_n: int) -> int:
    return max(1, math.ceil(k_frac * t_n))


def top_k_mask(pm: PooledMap, k_frac: float) -> BlockMask:
    t_n = pm.probs.shape[1]
    kk = top_k_count(k_frac, t_n)
    keep = np.zeros_like(pm.probs, dtype=bool)
    for i, row in enumerate(pm.probs):
        keep[i, _descending_order(row)[:kk]] = True
    return BlockMask(keep, pm.b_q, pm.b_kv, pm.n_tokens)


def top_p_row_count(row: np.ndarray, p_frac: float) -> int:
    """Length of the minimal descending prefix whose mass reaches p_frac."""
    csum = np.cumsum(row[_descending_order(row)])
    return int(np.searchsorted(csum, p_frac - P_SLACK, side="left")) + 1


def top_p_mask(pm: PooledMap, p_frac: float) -> BlockMask:
    keep = np.zeros_like(pm.probs, dtype=bool)
    for i, row in enumerate(pm.probs):
        order = _descending_order(row)
        keep[i, order[: min(top_p_row_count(row, p_frac), len(order))]] = True
    return BlockMask(keep, pm.b_q, pm.b_kv, pm.n_tokens)


def hybrid_mask(pm: PooledMap, cfg: SparsityConfig) -> BlockMask:
    return top_k_mask(pm, cfg.k_frac) | top_p_mask(pm, cfg.p_frac)


def expand_mask(bm: BlockMask) -> np.ndarray:
    """Token-level 0/1 matrix: entry (a,b) = keep[a // b_q, b // b_kv]."""
    n = bm.n_tokens
    full = np.repeat(np.repeat(bm.keep, bm.b_q, axis=0), bm.b_kv, axis=1)
    return full[:n, :n].astype(np.float64)


# ---------------------------------------------------------------------------
# Serialization: two-line header, then 0/1 rows
# ---------------------------------------------------------------------------

def write_mask_csv(path, bm: BlockMask) -> None:
    with open(path, "w", newline="") as f:
        f.write(f"b_q={bm.b_q},b_kv={bm.b_kv},n_tokens={bm.n_tokens}\n")
        f.write(",".join(f"c{j}" for j in range(bm.keep.shape[1])) + "\n")
        for row in bm.keep:
            f.write(",".join("1" if v else "0" for v in row) + "\n")


def read_mask_csv(path) -> BlockMask:
    with open(path, "r", newline="") as f:
        meta = dict(kv.split("=") for kv in f.readline().strip().split(","))
        f.readline()  # column header carries no information beyond width
        rows = [[c == "1" for c in line.strip().split(",")] for line in f if line.strip()]
    return BlockMask(
        np.array(rows, dtype=bool),
        b_q=int(meta["b_q"]),
        b_kv=int(meta["b_kv"]),
        n_tokens=int(meta["n_tokens"]),
    )


def write_pooled_map_csv(path, pm: PooledMap) -> None:
    with open(path, "w", newline="") as f:
        f.write(f"b_q={pm.b_q},b_kv={pm.b_kv},n_tokens={pm.n_tokens}\n")
        f.write(",".join(f"c{j}" for j in range(pm.probs.shape[1])) + "\n")
        for row in pm.probs:
            f.write(",".join(format_float(v) for v in row) + "\n")
