"""Acceptance gate: one test per shipping criterion, tolerances inline.

The heavy fixtures (a 2,000-step teacher) are module-scoped and shared by
the two training criteria, so the whole file stays well inside its time
budgets on a laptop CPU.
"""

import json
import os
import time

import numpy as np
import pytest

from sparseattn_lab import flowmatch as fm
from sparseattn_lab.analysis import RowDistribution, case1_experiment, error_decompose
from sparseattn_lab.attention import (
    BlockCounter,
    attention_backward,
    sparse_attention_with_mask,
)
from sparseattn_lab.cli import main as cli_main
from sparseattn_lab.masker import (
    BlockMask,
    PooledMap,
    SparsityConfig,
    expand_mask,
    hybrid_mask,
    top_k_mask,
    top_p_mask,
    top_p_row_count,
)
from sparseattn_lab.numerics import make_rng, num_blocks
from sparseattn_lab.oracles import (
    oracle_dense_attention,
    oracle_fd_grad,
    oracle_masked_attention,
    oracle_top_p_count,
)


def rand_qkv(rng, n, d, d_v=None):
    return (rng.normal(size=(n, d)), rng.normal(size=(n, d)),
            rng.normal(size=(n, d_v or d)))


def all_ones_mask(n, b):
    return BlockMask(np.ones((num_blocks(n, b), num_blocks(n, b))), b, b, n)


def random_block_mask(rng, n, b_q, b_kv):
    t_m, t_n = num_blocks(n, b_q), num_blocks(n, b_kv)
    keep = (rng.uniform(size=(t_m, t_n)) < 0.4).astype(float)
    for i in range(t_m):
        if keep[i].sum() == 0:
            keep[i, rng.integers(t_n)] = 1.0
    return BlockMask(keep, b_q, b_kv, n)


def random_pooled_map(rng, t_m, t_n):
    probs = rng.dirichlet(np.ones(t_n), size=t_m)
    return PooledMap(probs, b_q=t_n, b_kv=t_m, n_tokens=t_m * t_n)


def test_c01_kernel_matches_dense_oracle():
    """Tiled kernel with an all-kept mask vs. naive attention: <= 1e-10."""
    t0 = time.perf_counter()
    worst = 0.0
    for n in (64, 128, 256):
        for d in (16, 64):
            for seed in range(5):
                q, k, v = rand_qkv(make_rng(1000 * n + 10 * d + seed), n, d)
                got = sparse_attention_with_mask(q, k, v, all_ones_mask(n, 32)).out
                worst = max(worst, float(np.abs(got - oracle_dense_attention(q, k, v)).max()))
    assert worst <= 1e-10
    assert time.perf_counter() - t0 < 10.0


def test_c02_kernel_matches_masked_oracle():
    """50 random block masks at N=128 vs. token-level -inf oracle: <= 1e-10."""
    t0 = time.perf_counter()
    n, worst = 128, 0.0
    for seed in range(50):
        rng = make_rng(7000 + seed)
        q, k, v = rand_qkv(rng, n, 32)
        bm = random_block_mask(rng, n, int(rng.choice([16, 24, 32, 48])),
                               int(rng.choice([16, 24, 32, 48])))
        got = sparse_attention_with_mask(q, k, v, bm).out
        want = oracle_masked_attention(q, k, v, expand_mask(bm))
        worst = max(worst, float(np.abs(got - want).max()))
    assert worst <= 1e-10
    assert time.perf_counter() - t0 < 30.0


def test_c03_error_decomposition_identity():
    """dropped + renorm == dense minus sparse output, <= 1e-12, 1,000 triples."""
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(1000):
        rng = make_rng(20000 + seed)
        t_n = int(rng.integers(2, 24))
        d_v = int(rng.integers(1, 8))
        p = rng.dirichlet(np.ones(t_n) * float(rng.uniform(0.2, 5.0)))
        m = (rng.uniform(size=t_n) < 0.5).astype(float)
        if m.sum() == 0:
            m[rng.integers(t_n)] = 1.0
        v = rng.normal(size=(t_n, d_v))
        rep = error_decompose(p, m, v)
        o = p @ v
        o_s = ((p * m) / (p * m).sum()) @ v
        worst = max(worst, float(np.abs((rep.dropped_term + rep.renorm_term) - (o - o_s)).max()))
    assert worst <= 1e-12
    assert time.perf_counter() - t0 < 5.0


def test_c04_retained_mass_worked_example():
    """Concentrating mass (tau 0.6 -> 0.8) shrinks every error term; exact
    dropped vectors, tolerance 1e-15."""
    v = np.eye(3)
    before = error_decompose([0.6, 0.2, 0.2], [1, 0, 0], v)
    after = error_decompose([0.8, 0.1, 0.1], [1, 0, 0], v)
    np.testing.assert_allclose(before.dropped_term, [0.0, 0.2, 0.2], atol=1e-15)
    np.testing.assert_allclose(after.dropped_term, [0.0, 0.1, 0.1], atol=1e-15)
    assert abs(before.tau - 0.6) <= 1e-15
    assert abs(after.tau - 0.8) <= 1e-15
    assert np.abs(after.total_error).sum() < np.abs(before.total_error).sum()


def test_c05_matched_budget_orderings():
    """Per-generator mean L1 orderings hold in >= 90 of 100 trials, and the
    hybrid mean sits within 5% of the better single rule."""
    t0 = time.perf_counter()

    def check(res, better, worse):
        assert res.n_trials == 100 and res.skipped == 0
        wins = sum(1 for b, w in zip(res.l1[better], res.l1[worse]) if b < w)
        assert wins >= 90, f"{better} beat {worse} in only {wins}/100 trials"
        assert res.mean_l1(better) < res.mean_l1(worse)
        rel = abs(res.mean_l1("hybrid") - res.mean_l1(better)) / res.mean_l1(better)
        assert rel <= 0.05, f"hybrid {rel:.4f} away from {better}"

    uni = case1_experiment(RowDistribution.uniform(seed=0), n_rows=64, n_cols=64,
                           target_sparsity=0.8, seeds=range(100))
    check(uni, better="top_p", worse="top_k")
    ske = case1_experiment(RowDistribution.skewed(seed=1), n_rows=64, n_cols=64,
                           target_sparsity=0.9, seeds=range(100))
    check(ske, better="top_k", worse="top_p")
    assert time.perf_counter() - t0 < 120.0


def test_c06_top_p_minimality():
    """Production prefix count equals the exhaustive oracle on 500 short rows."""
    t0 = time.perf_counter()
    rng = make_rng(31)
    edges = (1.0, 0.5, 1e-9)
    for trial in range(500):
        t_n = int(rng.integers(1, 13))
        row = rng.dirichlet(np.ones(t_n) * float(rng.uniform(0.2, 4.0)))
        # mostly random thresholds, with the boundary values mixed in
        p_frac = edges[trial % 3] if trial % 7 == 0 else float(rng.uniform(0.01, 1.0))
        assert top_p_row_count(row, p_frac) == oracle_top_p_count(row, p_frac)
    assert time.perf_counter() - t0 < 10.0


def test_c07_hybrid_is_the_union():
    """Hybrid mask equals elementwise OR of the two single-rule masks, exact."""
    rng = make_rng(47)
    for _ in range(200):
        t_m, t_n = int(rng.integers(1, 20)), int(rng.integers(1, 20))
        pm = random_pooled_map(rng, t_m, t_n)
        cfg = SparsityConfig(float(rng.uniform(0.01, 1.0)), float(rng.uniform(0.01, 1.0)),
                             pm.b_q, pm.b_kv)
        union = top_k_mask(pm, cfg.k_frac) | top_p_mask(pm, cfg.p_frac)
        np.testing.assert_array_equal(hybrid_mask(pm, cfg).keep, union.keep)


def _rel_err(got, want):
    return float(np.abs(got - want).max() / max(np.abs(want).max(), 1e-12))


def test_c08_gradients_match_finite_differences():
    """attention_backward <= 1e-5 and full-model grads <= 1e-4 vs. central
    differences, three seeds each."""
    t0 = time.perf_counter()
    for seed in range(3):
        rng = make_rng(600 + seed)
        q, k, v = rand_qkv(rng, 12, 6)
        bm = random_block_mask(rng, 12, 4, 3)
        w = rng.normal(size=(12, 6))
        grads = attention_backward(q, k, v, bm, w)
        fd = oracle_fd_grad(lambda: float((sparse_attention_with_mask(q, k, v, bm).out * w).sum()),
                            [q, k, v], h=1e-6)
        for got, want in zip((grads.dq, grads.dk, grads.dv), fd):
            assert _rel_err(got, want) <= 1e-5

    arch = fm.ArchConfig(n_tokens=8, channels=4, d_model=8, n_layers=1, n_classes=3)
    data = fm.FieldDataset(n_tokens=8, channels=4, n_classes=3)
    for seed in range(3):
        model = fm.make_model(arch, seed=700 + seed)
        batch = data.batch(make_rng(800 + seed), 2)
        grads = {key: np.zeros_like(p) for key, p in model.params.items()}
        count = 0
        for s in batch:
            u, cache = fm._forward(model, s.x_t, s.t, s.cond)
            count += u.size
            for key, g in fm._backward(model, cache, 2.0 * (u - s.v_t)).items():
                grads[key] += g
        for key in sorted(model.params):
            (fd,) = oracle_fd_grad(lambda: fm.diffusion_loss(model, batch),
                                   [model.params[key]], h=1e-5)
            assert _rel_err(grads[key] / count, fd) <= 1e-4, key
    assert time.perf_counter() - t0 < 60.0


def test_c09_block_skip_accounting_and_speedup():
    """Computed blocks == kept blocks exactly; a 95%-sparse mask computes
    exactly 1/20 of the dense block count and runs >= 5x faster at N=4096."""
    rng = make_rng(90)
    for _ in range(10):
        n = int(rng.choice([192, 256, 512]))
        bm = random_block_mask(rng, n, int(rng.choice([32, 64])), int(rng.choice([32, 64])))
        q, k, v = rand_qkv(rng, n, 16)
        counter = BlockCounter()
        sparse_attention_with_mask(q, k, v, bm, counter=counter)
        assert counter.count == int(bm.keep.sum())

    n, d, b_q, b_kv = 4096, 64, 128, 205
    t_m, t_n = num_blocks(n, b_q), num_blocks(n, b_kv)
    assert (t_m, t_n) == (32, 20)
    keep = np.zeros((t_m, t_n))
    keep[np.arange(t_m), make_rng(91).integers(t_n, size=t_m)] = 1.0
    sparse_bm = BlockMask(keep, b_q, b_kv, n)
    dense_bm = BlockMask(np.ones((t_m, t_n)), b_q, b_kv, n)
    assert abs(sparse_bm.sparsity() - 0.95) <= 1e-15

    q, k, v = rand_qkv(make_rng(92), n, d)
    dense_counter, sparse_counter = BlockCounter(), BlockCounter()
    sparse_attention_with_mask(q, k, v, dense_bm, counter=dense_counter)
    sparse_attention_with_mask(q, k, v, sparse_bm, counter=sparse_counter)
    assert dense_counter.count == 20 * sparse_counter.count

    dense_t = min(_timed(lambda: sparse_attention_with_mask(q, k, v, dense_bm)) for _ in range(3))
    sparse_t = min(_timed(lambda: sparse_attention_with_mask(q, k, v, sparse_bm)) for _ in range(3))
    speedup = dense_t / sparse_t
    assert speedup >= 5.0, f"speedup {speedup:.2f}x below 5x"


def _timed(fn):
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


DESK_ARCH = fm.ArchConfig(n_tokens=64, channels=8, d_model=32, n_layers=2, n_classes=4)
DESK_DATA = fm.FieldDataset(n_tokens=64, channels=8, n_classes=4)
DESK_CFG = SparsityConfig(k_frac=0.06, p_frac=0.15, b_q=4, b_kv=4)


@pytest.fixture(scope="module")
def desk_teacher():
    t0 = time.perf_counter()
    teacher = fm.make_model(DESK_ARCH, seed=0)
    fm.train_diffusion(teacher, DESK_DATA,
                       fm.TrainConfig(steps=2000, batch_size=16, lr=1e-3, seed=1))
    return {"model": teacher, "train_seconds": time.perf_counter() - t0}


def test_c10_distillation_desk_run(desk_teacher):
    """500 distillation steps at ~90% sparsity at least halve the held-out
    student-teacher gap, and fixed-count retained mass does not fall."""
    t0 = time.perf_counter()
    teacher = desk_teacher["model"]
    probe = DESK_DATA.batch(make_rng(777), 32)
    student0 = teacher.with_mode("sparse", DESK_CFG)
    vd0 = fm.vd_loss(student0, teacher, probe)
    tau0 = fm.measure_tau_bar(student0, probe, DESK_CFG)

    student, hist = fm.train_vd(teacher, DESK_CFG, DESK_DATA,
                                fm.TrainConfig(steps=500, batch_size=16, lr=1e-3, seed=2))
    vd1 = fm.vd_loss(student, teacher, probe)
    tau1 = fm.measure_tau_bar(student, probe, DESK_CFG)

    tail_sparsity = float(np.mean([np.mean(st.layer_sparsity) for st in hist[-50:]]))
    assert 0.85 <= tail_sparsity <= 0.95, f"student ran at {tail_sparsity:.3f} sparsity"
    assert vd1 <= 0.5 * vd0, f"vd {vd0:.4f} -> {vd1:.4f}"
    assert tau1 >= tau0, f"tau_bar fell {tau0:.4f} -> {tau1:.4f}"
    assert desk_teacher["train_seconds"] + time.perf_counter() - t0 < 900.0


def test_c11_finetune_drift_direction(desk_teacher):
    """Fine-tuning the dense model on shifted data drifts farther from the
    frozen teacher (held-out deviation) than distilling a sparse student on
    the same data, in at least 2 of 3 matched seeds."""
    teacher = desk_teacher["model"]
    data_b = fm.FieldDataset(n_tokens=64, channels=8, n_classes=4, shift=1.5)
    probe_b = data_b.batch(make_rng(888), 32)
    wins = 0
    for seed in (10, 11, 12):
        tc = fm.TrainConfig(steps=300, batch_size=16, lr=1e-3, seed=seed)
        dense_arm = fm.DenoiserModel(DESK_ARCH, fm.copy_params(teacher.params), "dense", None)
        fm.train_diffusion(dense_arm, data_b, tc)
        sparse_arm, _ = fm.train_vd(teacher, DESK_CFG, data_b, tc)
        drift_dense = fm.vd_loss(dense_arm, teacher, probe_b)
        drift_sparse = fm.vd_loss(sparse_arm, teacher, probe_b)
        wins += drift_dense > drift_sparse
    assert wins >= 2, f"dense arm drifted farther in only {wins}/3 seeds"


def test_c12_cli_outputs_are_deterministic(tmp_path):
    """Identical seed and config give byte-identical CSVs for every subcommand."""
    runs = {
        "mask-analyze": ["--gen-size", "16", "--k-frac", "0.2"],
        "attn-bench": ["--sizes", "256", "--sparsities", "0.0,0.5", "--reps", "1"],
        "case-repro": ["--trials", "10", "--rows", "32", "--cols", "32"],
        "distill-train": ["--pretrain-teacher", "--tokens", "8", "--channels", "2",
                          "--classes", "0", "--d-model", "8", "--layers", "1",
                          "--teacher-steps", "3", "--steps", "3", "--batch-size", "2",
                          "--block", "2", "--k-frac", "0.25", "--p-frac", "0.3"],
    }
    for sub, extra in runs.items():
        a, b = tmp_path / f"{sub}-a", tmp_path / f"{sub}-b"
        assert cli_main([sub, "--out", str(a), *extra]) == 0
        assert cli_main([sub, "--out", str(b), *extra]) == 0
        csvs = sorted(p for p in os.listdir(a) if p.endswith(".csv"))
        assert csvs
        for name in csvs:
            with open(a / name, "rb") as fa, open(b / name, "rb") as fb:
                assert fa.read() == fb.read(), f"{sub}/{name} not reproducible"
