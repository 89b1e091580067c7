"""Exact sparse-attention error decomposition and the two synthetic case studies.

The central identity: with token probabilities p, a 0/1 keep vector m, and
retained mass tau = sum(p*m), the sparse output error o - o_s splits into

    dropped = (p * (1-m)) @ V          what the mask threw away
    renorm  = (1 - 1/tau) * (p*m) @ V  distortion from re-normalizing the rest

and dropped + renorm equals o - o_s exactly. Case 1 compares top-k, top-p,
and hybrid masking at a matched kept-entry budget on synthetic row
ensembles. Case 2 measures how row concentration changes achievable
sparsity at a fixed retained-mass target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .masker import P_SLACK, BlockMask
from .numerics import as_tensor, format_float, make_rng


@dataclass(frozen=True)
class ErrorReport:
    """Single-row decomposition of the sparse-attention output error."""

    tau: float
    dropped_term: np.ndarray
    renorm_term: np.ndarray
    total_error: np.ndarray
    aggregate: float


def error_decompose(p_row, m_row, v) -> ErrorReport:
    p = np.asarray(p_row, dtype=np.float64).reshape(-1)
    m = np.asarray(m_row, dtype=np.float64).reshape(-1)
    v = as_tensor(v, rank=2)
    if p.shape != m.shape or v.shape[0] != p.size:
        raise ValueError(f"shape mismatch: p {p.shape}, m {m.shape}, v {v.shape}")
    if abs(p.sum() - 1.0) > 1e-12:
        raise ValueError(f"p_row sums to {p.sum()!r}, not 1")
    if not np.any(m != 0):
        raise ValueError("mask keeps nothing in this row")

    tau = float(p @ m)
    kept = p * m
    dropped_term = (p * (1.0 - m)) @ v
    renorm_term = (1.0 - 1.0 / tau) * (kept @ v)
    total = dropped_term + renorm_term

    o = p @ v
    o_s = (kept / tau) @ v
    direct = o - o_s
    if np.abs(total - direct).max() > 1e-12:
        raise AssertionError("decomposition does not match direct difference")
    return ErrorReport(
        tau=tau,
        dropped_term=dropped_term,
        renorm_term=renorm_term,
        total_error=total,
        aggregate=float(np.abs(direct).sum() / np.abs(o).sum()),
    )


def sparsity_of(bm: BlockMask) -> float:
    return bm.sparsity()


# ---------------------------------------------------------------------------
# Row ensembles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RowDistribution:
    """Generator for synthetic attention-probability rows.

    kind 'uniform': mostly flat Dirichlet(alpha) rows, plus a minority of
    strong-sink rows (fraction sink_frac, sink mass sink_mass). Real
    attention maps are never sink-free, and the sink rows matter here: at a
    matched kept budget they are where a mass threshold saves its slots.

    kind 'skewed': every row has a sink whose mass is drawn uniformly from
    sink_mass +/- sink_spread, n_tail mid-sized entries carrying tail_share
    of the remainder (spiky Dirichlet(alpha)), and dust spread over the
    other columns. The mid-sized entries are what a mass threshold drops on
    strong-sink rows and a fixed count keeps.
    """

    kind: str
    alpha: float
    sink_mass: float
    seed: int
    sink_frac: float = 0.25
    sink_spread: float = 0.2
    n_tail: int = 4
    tail_share: float = 0.9

    @classmethod
    def uniform(cls, seed: int, alpha: float = 5.0) -> "RowDistribution":
        return cls(kind="uniform", alpha=alpha, sink_mass=0.8, seed=seed)

    @classmethod
    def skewed(cls, seed: int, alpha: float = 0.4, sink_mass: float = 0.65) -> "RowDistribution":
        return cls(kind="skewed", alpha=alpha, sink_mass=sink_mass, seed=seed)

    def rows(self, n_rows: int, n_cols: int, trial: int = 0) -> np.ndarray:
        rng = make_rng((self.seed << 20) + trial)
        out = np.zeros((n_rows, n_cols))
        if self.kind == "uniform":
            n_sink = round(self.sink_frac * n_rows)
            for i in range(n_rows):
                if i < n_sink:
                    sink = rng.integers(n_cols)
                    cols = np.delete(np.arange(n_cols), sink)
                    out[i, cols] = rng.dirichlet(np.full(n_cols - 1, self.alpha)) * (1.0 - self.sink_mass)
                    out[i, sink] = self.sink_mass
                else:
                    out[i] = rng.dirichlet(np.full(n_cols, self.alpha))
        elif self.kind == "skewed":
            if n_cols < self.n_tail + 2:
                raise ValueError(f"skewed rows need at least {self.n_tail + 2} columns")
            for i in range(n_rows):
                s = rng.uniform(self.sink_mass - self.sink_spread, self.sink_mass + self.sink_spread)
                cols = rng.permutation(n_cols)
                out[i, cols[0]] = s
                out[i, cols[1 : 1 + self.n_tail]] = (
                    rng.dirichlet(np.full(self.n_tail, self.alpha)) * (1.0 - s) * self.tail_share
                )
                out[i, cols[1 + self.n_tail :]] = (
                    rng.dirichlet(np.ones(n_cols - 1 - self.n_tail)) * (1.0 - s) * (1.0 - self.tail_share)
                )
        else:
            raise ValueError(f"unknown kind {self.kind!r}")
        if np.abs(out.sum(axis=1) - 1.0).max() > 1e-12:
            raise AssertionError("generated rows are not normalized")
        return out


# ---------------------------------------------------------------------------
# Matched-budget mask calibration
# ---------------------------------------------------------------------------
# Top-k and top-p both keep a descending-order prefix of each row, so at a
# matched per-row count they would pick identical sets and the comparison
# would be vacuous. The budget is therefore matched globally: top-k keeps
# exactly K entries per row, and top-p's threshold is searched so its total
# kept count over all rows equals n_rows * K. The hybrid arm fixes a
# per-row floor of eta*K entries and searches its own mass threshold for
# the remainder of the budget.

def _row_order_and_cumsum(rows):
    order = np.argsort(-rows, axis=1, kind="stable")
    srt = np.take_along_axis(rows, order, axis=1)
    return order, np.cumsum(srt, axis=1)


def _counts_at(cumsum: np.ndarray, p: float) -> np.ndarray:
    n_cols = cumsum.shape[1]
    idx = np.array([np.searchsorted(c, p - P_SLACK, side="left") for c in cumsum])
    return np.minimum(idx + 1, n_cols)


def _prefix_mask(order: np.ndarray, counts) -> np.ndarray:
    n_rows, n_cols = order.shape
    counts = np.broadcast_to(np.asarray(counts, dtype=int), (n_rows,))
    keep = np.zeros((n_rows, n_cols), dtype=bool)
    for i in range(n_rows):
        keep[i, order[i, : counts[i]]] = True
    return keep


def _search_threshold(cumsum, total_target: int, floor: int = 1):
    """Smallest mass threshold whose total kept count hits the target, or
    None when no threshold lands on it exactly (step sizes > 1 at ties)."""
    candidates = np.unique(cumsum)
    totals_at = lambda p: int(np.maximum(_counts_at(cumsum, p), floor).sum())
    lo, hi = 0, len(candidates) - 1
    if totals_at(candidates[hi]) < total_target or totals_at(candidates[lo]) > total_target:
        return None
    while lo < hi:
        mid = (lo + hi) // 2
        if totals_at(candidates[mid]) >= total_target:
            hi = mid
        else:
            lo = mid + 1
    p = float(candidates[lo])
    return p if totals_at(p) == total_target else None


def relative_l1(p_rows: np.ndarray, keep: np.ndarray, v: np.ndarray) -> float:
    """Global relative L1 between dense and masked-renormalized outputs."""
    kept = p_rows * keep
    taus = kept.sum(axis=1, keepdims=True)
    if np.any(taus <= 0):
        raise ValueError("a row keeps zero probability mass")
    o = p_rows @ v
    o_s = (kept / taus) @ v
    return float(np.abs(o - o_s).sum() / np.abs(o).sum())


MASKERS = ("top_k", "top_p", "hybrid")


@dataclass
class Case1Result:
    n_rows: int
    n_cols: int
    target_sparsity: float
    l1: dict[str, list[float]] = field(default_factory=lambda: {m: [] for m in MASKERS})
    sparsity: dict[str, list[float]] = field(default_factory=lambda: {m: [] for m in MASKERS})
    skipped: int = 0

    @property
    def n_trials(self) -> int:
        return len(self.l1["top_k"])

    def mean_l1(self, masker: str) -> float:
        return float(np.mean(self.l1[masker]))

    def std_l1(self, masker: str) -> float:
        return float(np.std(self.l1[masker]))

    def mean_sparsity(self, masker: str) -> float:
        return float(np.mean(self.sparsity[masker]))


def case1_experiment(
    dist: RowDistribution,
    n_rows: int,
    n_cols: int,
    target_sparsity: float,
    seeds,
    eta: float = 0.6,
    d_v: int = 16,
) -> Case1Result:
    """Mean relative L1 of the three maskers at one matched kept budget."""
    if not (0.0 < target_sparsity < 1.0):
        raise ValueError(f"target_sparsity must be in (0,1), got {target_sparsity}")
    res = Case1Result(n_rows=n_rows, n_cols=n_cols, target_sparsity=target_sparsity)
    per_row = max(1, round((1.0 - target_sparsity) * n_cols))
    total = n_rows * per_row
    floor = max(1, round(eta * per_row))

    for trial in seeds:
        rows = dist.rows(n_rows, n_cols, trial=trial)
        v = make_rng((dist.seed << 21) + trial + 1).normal(size=(n_cols, d_v))
        order, cumsum = _row_order_and_cumsum(rows)

        p_plain = _search_threshold(cumsum, total)
        p_floor = _search_threshold(cumsum, total, floor=floor)
        if p_plain is None or p_floor is None:
            res.skipped += 1
            continue

        masks = {
            "top_k": _prefix_mask(order, per_row),
            "top_p": _prefix_mask(order, _counts_at(cumsum, p_plain)),
            "hybrid": _prefix_mask(order, np.maximum(_counts_at(cumsum, p_floor), floor)),
        }
        for name, keep in masks.items():
            res.l1[name].append(relative_l1(rows, keep, v))
            res.sparsity[name].append(1.0 - keep.sum() / keep.size)
    return res


def write_case1_csv(path, res: Case1Result) -> None:
    with open(path, "w", newline="") as f:
        f.write("masker,mean_l1,std_l1,sparsity,n_trials\n")
        if res.n_trials == 0:
            return
        for m in MASKERS:
            f.write(
                f"{m},{format_float(res.mean_l1(m))},{format_float(res.std_l1(m))},"
                f"{format_float(res.mean_sparsity(m))},{res.n_trials}\n"
            )


def case1_result_dict(res: Case1Result) -> dict:
    maskers = {}
    if res.n_trials > 0:
        maskers = {
            m: {
                "mean_l1": res.mean_l1(m),
                "std_l1": res.std_l1(m),
                "sparsity": res.mean_sparsity(m),
            }
            for m in MASKERS
        }
    return {
        "n_trials": res.n_trials,
        "skipped": res.skipped,
        "target_sparsity": res.target_sparsity,
        "maskers": maskers,
    }


# ---------------------------------------------------------------------------
# Case 2: concentration vs. achievable sparsity at fixed retained mass
# ---------------------------------------------------------------------------

def mass_keep_counts(rows: np.ndarray, retained_mass_target: float) -> np.ndarray:
    """Per row, how many largest entries are needed to retain the target mass."""
    _, cumsum = _row_order_and_cumsum(rows)
    return _counts_at(cumsum, retained_mass_target)


def case2_experiment(p_before, p_after, retained_mass_target: float, seed: int = 0, d_v: int = 8) -> dict:
    p_before = as_tensor(p_before, rank=2)
    p_after = as_tensor(p_after, rank=2)
    if p_before.shape != p_after.shape:
        raise ValueError("before/after shapes differ")
    for name, p in (("p_before", p_before), ("p_after", p_after)):
        if np.abs(p.sum(axis=1) - 1.0).max() > 1e-12:
            raise ValueError(f"{name} rows are not probability distributions")

    counts_before = mass_keep_counts(p_before, retained_mass_target)
    counts_after = mass_keep_counts(p_after, retained_mass_target)
    size = p_before.size

    # both matrices evaluated at the identical, more permissive keep counts
    matched = np.maximum(counts_before, counts_after)
    v = make_rng(seed).normal(size=(p_before.shape[1], d_v))
    order_b, _ = _row_order_and_cumsum(p_before)
    order_a, _ = _row_order_and_cumsum(p_after)
    return {
        "sparsity_before": 1.0 - counts_before.sum() / size,
        "sparsity_after": 1.0 - counts_after.sum() / size,
        "l1_before": relative_l1(p_before, _prefix_mask(order_b, matched), v),
        "l1_after": relative_l1(p_after, _prefix_mask(order_a, matched), v),
    }
