"""Command-line front end: four subcommands that turn the library into
seeded, rerunnable experiments with CSV/JSON reports.

Every run gets a fresh output directory (an existing one is an error, so
concurrent runs can't trample each other), a manifest.json with the fully
resolved config and library version, and primary outputs that are
byte-identical under a fixed seed. Wall-clock numbers go to a timings.json
sidecar, never into CSVs, and the only timestamp lives in the manifest.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import sys
import time

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import flowmatch as fm
from .analysis import (
    RowDistribution,
    case1_experiment,
    case1_result_dict,
    case2_experiment,
    write_case1_csv,
)
from .attention import BlockCounter, sparse_attention_with_mask
from .masker import (
    BlockMask,
    PooledMap,
    SparsityConfig,
    hybrid_mask,
    pooled_map,
    top_k_mask,
    top_p_mask,
    write_mask_csv,
    write_pooled_map_csv,
)
from .numerics import format_float, make_rng, read_tensor, softmax_rows

THREADS_ENV = "SPARSEATTN_LAB_THREADS"

DEFAULTS: dict[str, dict] = {
    "mask-analyze": {
        "seed": 0, "format": "csv", "q": None, "k": None,
        "gen_size": 32, "gen_block": 1,
        "k_frac": 0.03, "p_frac": 0.2, "b_q": 16, "b_kv": 16,
    },
    "attn-bench": {
        "seed": 0, "format": "csv", "sizes": "512,1024", "d": 64,
        "b_q": 64, "b_kv": 64, "sparsities": "0.0,0.5,0.95",
        "reps": 3, "max_n": 8192,
    },
    "case-repro": {
        "seed": 0, "format": "csv", "trials": 100, "rows": 64, "cols": 64,
        "ts_uniform": 0.8, "ts_skewed": 0.9, "eta": 0.6,
        "mass_target": 0.6, "d_v": 16,
    },
    "distill-train": {
        "seed": 0, "format": "csv", "objective": "vd", "steps": 500,
        "teacher": None, "pretrain_teacher": False, "teacher_steps": 2000,
        "batch_size": 16, "lr": 1e-3,
        "k_frac": 0.06, "p_frac": 0.15, "block": 4,
        "tokens": 64, "channels": 8, "classes": 4,
        "d_model": 32, "layers": 2,
        "shift": 0.0, "teacher_shift": 0.0, "checkpoint_every": 0,
    },
}


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------

def _cell(v) -> str:
    if isinstance(v, float):
        return format_float(v)
    return str(v)


def write_table(out_dir: str, name: str, header: list[str], rows: list[list], fmt: str) -> str:
    """One report table, as name.csv or name.json depending on --format."""
    if fmt == "csv":
        path = os.path.join(out_dir, f"{name}.csv")
        with open(path, "w", newline="") as f:
            f.write(",".join(header) + "\n")
            for row in rows:
                f.write(",".join(_cell(v) for v in row) + "\n")
    else:
        path = os.path.join(out_dir, f"{name}.json")
        with open(path, "w") as f:
            json.dump([dict(zip(header, row)) for row in rows], f, indent=2, sort_keys=True)
            f.write("\n")
    return path


def write_json(out_dir: str, name: str, payload: dict) -> str:
    path = os.path.join(out_dir, f"{name}.json")
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def write_manifest(out_dir: str, subcommand: str, cfg: dict) -> None:
    write_json(out_dir, "manifest", {
        "version": __version__,
        "subcommand": subcommand,
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "config": cfg,
    })


def _parse_grid(value, cast):
    if isinstance(value, (list, tuple)):
        return [cast(v) for v in value]
    return [cast(v) for v in str(value).split(",") if v != ""]


# ---------------------------------------------------------------------------
# mask-analyze
# ---------------------------------------------------------------------------

def cmd_mask_analyze(cfg: dict, out: str) -> int:
    scfg = SparsityConfig(cfg["k_frac"], cfg["p_frac"], cfg["b_q"], cfg["b_kv"])
    if cfg["q"] is not None or cfg["k"] is not None:
        if cfg["q"] is None or cfg["k"] is None:
            raise ValueError("--q and --k must be given together")
        q = read_tensor(cfg["q"])
        k = read_tensor(cfg["k"])
        pm = pooled_map(q, k, scfg)
    else:
        size, blk = int(cfg["gen_size"]), int(cfg["gen_block"])
        probs = softmax_rows(make_rng(int(cfg["seed"])).normal(size=(size, size)))
        pm = PooledMap(probs, blk, blk, size * blk)

    masks = {
        "top_k": top_k_mask(pm, scfg.k_frac),
        "top_p": top_p_mask(pm, scfg.p_frac),
        "hybrid": hybrid_mask(pm, scfg),
    }
    report_rows = []
    for name, bm in masks.items():
        counts = bm.keep.sum(axis=1)
        tau_bar = float((pm.probs * bm.keep).sum(axis=1).mean())
        report_rows.append([
            name, bm.sparsity(), tau_bar,
            float(counts.mean()), int(counts.min()), int(counts.max()),
        ])
        write_mask_csv(os.path.join(out, f"mask_{name}.csv"), bm)
    write_pooled_map_csv(os.path.join(out, "pooled_map.csv"), pm)

    write_table(out, "report",
                ["masker", "sparsity", "tau_bar", "mean_keep", "min_keep", "max_keep"],
                report_rows, cfg["format"])
    n_rows = pm.probs.shape[0]
    count_rows = [
        [i] + [int(masks[m].keep[i].sum()) for m in ("top_k", "top_p", "hybrid")]
        for i in range(n_rows)
    ]
    write_table(out, "keep_counts", ["row", "top_k", "top_p", "hybrid"],
                count_rows, cfg["format"])
    for name, bm in masks.items():
        print(f"{name}: sparsity={bm.sparsity():.4f} kept={int(bm.keep.sum())}")
    return 0


# ---------------------------------------------------------------------------
# attn-bench
# ---------------------------------------------------------------------------

def _bench_mask(n: int, b_q: int, b_kv: int, target_sparsity: float, rng) -> BlockMask:
    """Random mask with a fixed per-row keep count near the target sparsity."""
    t_m = -(-n // b_q)
    t_n = -(-n // b_kv)
    keep_per_row = max(1, round((1.0 - target_sparsity) * t_n))
    keep = np.zeros((t_m, t_n))
    for i in range(t_m):
        keep[i, rng.choice(t_n, size=keep_per_row, replace=False)] = 1.0
    return BlockMask(keep, b_q, b_kv, n)


def _time_call(fn, reps: int) -> float:
    best = float("inf")
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cmd_attn_bench(cfg: dict, out: str) -> int:
    sizes = _parse_grid(cfg["sizes"], int)
    sparsities = _parse_grid(cfg["sparsities"], float)
    d, b_q, b_kv = int(cfg["d"]), int(cfg["b_q"]), int(cfg["b_kv"])
    reps = int(cfg["reps"])
    max_n = int(cfg["max_n"])
    over = [n for n in sizes if n > max_n]
    if over:
        raise ValueError(f"sizes {over} exceed --max-n {max_n}")

    rng = make_rng(int(cfg["seed"]))
    rows, timings = [], []
    for n in sizes:
        q = rng.normal(size=(n, d))
        k = rng.normal(size=(n, d))
        v = rng.normal(size=(n, d))
        t_m = -(-n // b_q)
        t_n = -(-n // b_kv)
        dense_bm = BlockMask(np.ones((t_m, t_n)), b_q, b_kv, n)
        dense_out = sparse_attention_with_mask(q, k, v, dense_bm).out
        dense_s = _time_call(lambda: sparse_attention_with_mask(q, k, v, dense_bm), reps)
        for target in sparsities:
            bm = _bench_mask(n, b_q, b_kv, target, rng)
            counter = BlockCounter()
            sparse_out = sparse_attention_with_mask(q, k, v, bm, counter=counter).out
            sparse_s = _time_call(lambda: sparse_attention_with_mask(q, k, v, bm), reps)
            total_blocks = bm.keep.size
            assert counter.count == int(bm.keep.sum()), "computed blocks must equal kept blocks"
            ratio = counter.count / total_blocks
            achieved = 1.0 - ratio
            max_dev = float(np.abs(sparse_out - dense_out).max())
            rows.append([n, d, b_q, b_kv, achieved, counter.count, total_blocks, ratio, max_dev])
            timings.append({
                "n": n, "sparsity": achieved,
                "dense_s": dense_s, "sparse_s": sparse_s,
                "speedup": dense_s / sparse_s if sparse_s > 0 else float("inf"),
            })
            print(f"n={n} sparsity={achieved:.4f} blocks {counter.count}/{total_blocks} "
                  f"speedup {dense_s / sparse_s:.2f}x")

    write_table(out, "bench",
                ["n", "d", "b_q", "b_kv", "sparsity", "computed_blocks",
                 "total_blocks", "block_ratio", "max_dev_from_dense"],
                rows, cfg["format"])
    write_json(out, "timings", {"reps": reps, "entries": timings})
    return 0


# ---------------------------------------------------------------------------
# case-repro
# ---------------------------------------------------------------------------

def _ordering_lines(name: str, res, better: str, worse: str) -> list[dict]:
    per_trial = list(zip(res.l1[better], res.l1[worse]))
    wins = sum(1 for b, w in per_trial if b < w)
    n = res.n_trials
    mean_ok = res.mean_l1(better) < res.mean_l1(worse)
    win_ok = n > 0 and wins >= 0.9 * n
    hy_rel = abs(res.mean_l1("hybrid") - res.mean_l1(better)) / res.mean_l1(better)
    return [
        {"check": f"{name}: mean_l1({better}) < mean_l1({worse})",
         "passed": bool(mean_ok and win_ok),
         "detail": f"means {res.mean_l1(better):.4f} vs {res.mean_l1(worse):.4f}, wins {wins}/{n}"},
        {"check": f"{name}: hybrid within 5% of {better}",
         "passed": bool(hy_rel <= 0.05),
         "detail": f"hybrid {res.mean_l1('hybrid'):.4f} vs {res.mean_l1(better):.4f} (rel {hy_rel:.4f})"},
    ]


def cmd_case_repro(cfg: dict, out: str) -> int:
    seed = int(cfg["seed"])
    trials = int(cfg["trials"])
    n_rows, n_cols, d_v = int(cfg["rows"]), int(cfg["cols"]), int(cfg["d_v"])
    eta = float(cfg["eta"])
    fmt = cfg["format"]

    uni = case1_experiment(RowDistribution.uniform(seed=seed), n_rows, n_cols,
                           float(cfg["ts_uniform"]), range(trials), eta=eta, d_v=d_v)
    ske = case1_experiment(RowDistribution.skewed(seed=seed + 1), n_rows, n_cols,
                           float(cfg["ts_skewed"]), range(trials), eta=eta, d_v=d_v)
    write_case1_csv(os.path.join(out, "case1_uniform.csv"), uni)
    write_case1_csv(os.path.join(out, "case1_skewed.csv"), ske)
    if fmt == "json":
        write_json(out, "case1_uniform", case1_result_dict(uni))
        write_json(out, "case1_skewed", case1_result_dict(ske))

    rng = make_rng(seed + 2)
    before = rng.dirichlet(np.ones(n_cols), size=n_rows)
    sharp = before**2
    after = sharp / sharp.sum(axis=1, keepdims=True)
    c2 = case2_experiment(before, after, float(cfg["mass_target"]), seed=seed + 3, d_v=d_v)
    write_table(out, "case2",
                ["sparsity_before", "sparsity_after", "l1_before", "l1_after"],
                [[c2["sparsity_before"], c2["sparsity_after"], c2["l1_before"], c2["l1_after"]]],
                fmt)

    if trials == 0:
        print("warning: 0 trials requested; tables are empty", file=sys.stderr)
        write_json(out, "summary", {"orderings": [], "skipped": {"uniform": 0, "skewed": 0}})
        return 0

    orderings = (_ordering_lines("uniform", uni, "top_p", "top_k")
                 + _ordering_lines("skewed", ske, "top_k", "top_p"))
    c2_checks = [
        {"check": "case2: sparser after concentration",
         "passed": bool(c2["sparsity_after"] > c2["sparsity_before"]),
         "detail": f"{c2['sparsity_before']:.4f} -> {c2['sparsity_after']:.4f}"},
        {"check": "case2: lower l1 after concentration",
         "passed": bool(c2["l1_after"] < c2["l1_before"]),
         "detail": f"{c2['l1_before']:.4f} -> {c2['l1_after']:.4f}"},
    ]
    for line in orderings + c2_checks:
        status = "PASS" if line["passed"] else "FAIL"
        print(f"{status} {line['check']} ({line['detail']})")
    if uni.skipped or ske.skipped:
        print(f"note: skipped infeasible trials: uniform={uni.skipped} skewed={ske.skipped}",
              file=sys.stderr)
    write_json(out, "summary", {
        "orderings": orderings + c2_checks,
        "skipped": {"uniform": uni.skipped, "skewed": ske.skipped},
    })
    return 0


# ---------------------------------------------------------------------------
# distill-train
# ---------------------------------------------------------------------------

def _stats_rows(history) -> list[list]:
    rows = []
    for st in history:
        sp = float(np.mean(st.layer_sparsity)) if st.layer_sparsity else 0.0
        rows.append([st.step, st.loss, sp, st.tau_bar, st.grad_norm])
    return rows


STATS_HEADER = ["step", "loss", "sparsity", "tau_bar", "grad_norm"]


def _abort_diverged(out: str, arch, e: "fm.TrainingDiverged", mode: str,
                    scfg, seed: int, fmt: str) -> int:
    wreck = fm.DenoiserModel(arch, e.last_params, mode, scfg if mode == "sparse" else None)
    ck = fm.save_checkpoint(out, wreck, e.step, seed, tag="last_good")
    write_table(out, "stats", STATS_HEADER, _stats_rows(e.history), fmt)
    write_json(out, "summary", {"diverged_at_step": e.step, "last_good_checkpoint": ck})
    print(f"error: training diverged at step {e.step}; last good state in {ck}",
          file=sys.stderr)
    return 1


def cmd_distill_train(cfg: dict, out: str) -> int:
    seed = int(cfg["seed"])
    fmt = cfg["format"]
    data_base = fm.FieldDataset(int(cfg["tokens"]), int(cfg["channels"]),
                                n_classes=int(cfg["classes"]), shift=float(cfg["teacher_shift"]))
    data_train = fm.FieldDataset(int(cfg["tokens"]), int(cfg["channels"]),
                                 n_classes=int(cfg["classes"]), shift=float(cfg["shift"]))

    if cfg["teacher"]:
        teacher, t_manifest = fm.load_checkpoint(cfg["teacher"])
        if teacher.attn_mode != "dense":
            raise ValueError("teacher checkpoint must be a dense-attention model")
        teacher_step = int(t_manifest["step"])
    elif cfg["pretrain_teacher"]:
        arch = fm.ArchConfig(int(cfg["tokens"]), int(cfg["channels"]), int(cfg["d_model"]),
                             int(cfg["layers"]), n_classes=int(cfg["classes"]))
        teacher = fm.make_model(arch, seed=seed)
        teacher_step = int(cfg["teacher_steps"])
        try:
            fm.train_diffusion(teacher, data_base,
                               fm.TrainConfig(steps=teacher_step, batch_size=int(cfg["batch_size"]),
                                              lr=float(cfg["lr"]), seed=seed + 1))
        except fm.TrainingDiverged as e:
            return _abort_diverged(out, arch, e, "dense", None, seed, fmt)
        fm.save_checkpoint(out, teacher, teacher_step, seed, tag="teacher")
    else:
        raise ValueError("need --teacher <checkpoint dir> or --pretrain-teacher")

    # deviation metric: held-out draws from the distribution being trained on
    probe = data_train.batch(make_rng(seed + 4242), 16)
    scfg = SparsityConfig(float(cfg["k_frac"]), float(cfg["p_frac"]),
                          int(cfg["block"]), int(cfg["block"]))
    steps = int(cfg["steps"])
    tc = fm.TrainConfig(steps=steps, batch_size=int(cfg["batch_size"]), lr=float(cfg["lr"]),
                        seed=seed + 2, checkpoint_every=int(cfg["checkpoint_every"]),
                        out_dir=out if int(cfg["checkpoint_every"]) else None)

    if cfg["objective"] == "vd":
        dev_initial = fm.vd_loss(teacher.with_mode("sparse", scfg), teacher, probe)
    else:
        model = fm.DenoiserModel(teacher.arch, fm.copy_params(teacher.params), "dense", None)
        dev_initial = 0.0  # starts as an exact copy of the teacher

    try:
        if cfg["objective"] == "vd":
            model, history = fm.train_vd(teacher, scfg, data_train, tc)
        else:
            model, history = fm.train_diffusion(model, data_train, tc)
    except fm.TrainingDiverged as e:
        mode = "sparse" if cfg["objective"] == "vd" else "dense"
        return _abort_diverged(out, teacher.arch, e, mode, scfg, seed, fmt)

    dev_final = fm.vd_loss(model, teacher, probe)
    fm.save_checkpoint(out, model, steps, seed, tag="student")
    write_table(out, "stats", STATS_HEADER, _stats_rows(history), fmt)
    summary = {
        "objective": cfg["objective"],
        "steps": steps,
        "teacher_step": teacher_step,
        "loss_first": history[0].loss if history else None,
        "loss_final": history[-1].loss if history else None,
        "teacher_deviation_initial": dev_initial,
        "teacher_deviation_final": dev_final,
        "mean_sparsity": (float(np.mean([np.mean(st.layer_sparsity) for st in history]))
                          if history and history[0].layer_sparsity else 0.0),
    }
    write_json(out, "summary", summary)
    if history:
        print(f"{cfg['objective']}: loss {summary['loss_first']:.5f} -> {summary['loss_final']:.5f}, "
              f"teacher deviation {dev_initial:.5f} -> {dev_final:.5f}")
    else:
        print(f"{cfg['objective']}: 0 steps, student equals teacher")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing and dispatch
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.add_argument("--out", default=None, help="output directory (must not exist yet)")
    p.add_argument("--format", choices=("csv", "json"), default=argparse.SUPPRESS)
    p.add_argument("--config", default=None, help="JSON config file; flags override it")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparseattn-lab",
                                     description="block-sparse attention experiments")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    S = argparse.SUPPRESS

    p = sub.add_parser("mask-analyze", help="build and report the three masks")
    _add_common(p)
    p.add_argument("--q", default=S, help="query tensor file (.spt2 or .csv)")
    p.add_argument("--k", default=S, help="key tensor file (.spt2 or .csv)")
    p.add_argument("--gen-size", type=int, default=S, help="generated pooled-map grid size")
    p.add_argument("--gen-block", type=int, default=S)
    p.add_argument("--k-frac", type=float, default=S)
    p.add_argument("--p-frac", type=float, default=S)
    p.add_argument("--b-q", type=int, default=S)
    p.add_argument("--b-kv", type=int, default=S)

    p = sub.add_parser("attn-bench", help="time dense vs masked attention")
    _add_common(p)
    p.add_argument("--sizes", default=S, help="comma list of sequence lengths")
    p.add_argument("--d", type=int, default=S)
    p.add_argument("--b-q", type=int, default=S)
    p.add_argument("--b-kv", type=int, default=S)
    p.add_argument("--sparsities", default=S, help="comma list of target sparsities")
    p.add_argument("--reps", type=int, default=S)
    p.add_argument("--max-n", type=int, default=S)

    p = sub.add_parser("case-repro", help="matched-budget masker comparison tables")
    _add_common(p)
    p.add_argument("--trials", type=int, default=S)
    p.add_argument("--rows", type=int, default=S)
    p.add_argument("--cols", type=int, default=S)
    p.add_argument("--ts-uniform", type=float, default=S)
    p.add_argument("--ts-skewed", type=float, default=S)
    p.add_argument("--eta", type=float, default=S)
    p.add_argument("--mass-target", type=float, default=S)
    p.add_argument("--d-v", type=int, default=S)

    p = sub.add_parser("distill-train", help="train a sparse student against a dense teacher")
    _add_common(p)
    p.add_argument("--teacher", default=S, help="teacher checkpoint directory")
    p.add_argument("--pretrain-teacher", action="store_true", default=S)
    p.add_argument("--objective", choices=("vd", "diffusion"), default=S)
    p.add_argument("--steps", type=int, default=S)
    p.add_argument("--teacher-steps", type=int, default=S)
    p.add_argument("--batch-size", type=int, default=S)
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--k-frac", type=float, default=S)
    p.add_argument("--p-frac", type=float, default=S)
    p.add_argument("--block", type=int, default=S)
    p.add_argument("--tokens", type=int, default=S)
    p.add_argument("--channels", type=int, default=S)
    p.add_argument("--classes", type=int, default=S)
    p.add_argument("--d-model", type=int, default=S)
    p.add_argument("--layers", type=int, default=S)
    p.add_argument("--shift", type=float, default=S)
    p.add_argument("--teacher-shift", type=float, default=S)
    p.add_argument("--checkpoint-every", type=int, default=S)
    return parser


COMMANDS = {
    "mask-analyze": cmd_mask_analyze,
    "attn-bench": cmd_attn_bench,
    "case-repro": cmd_case_repro,
    "distill-train": cmd_distill_train,
}


def resolve_config(args: argparse.Namespace) -> tuple[str, dict, str]:
    """Layered config: hard defaults, then config file, then explicit flags."""
    given = {k: v for k, v in vars(args).items() if k not in ("subcommand", "out", "config")}
    cfg = dict(DEFAULTS[args.subcommand])
    out = args.out
    if args.config:
        with open(args.config) as f:
            file_cfg = json.load(f)
        for key, value in file_cfg.items():
            norm = key.replace("-", "_")
            if norm == "out":
                if out is None:
                    out = value
                continue
            if norm not in cfg:
                raise ValueError(f"unknown config key {key!r} for {args.subcommand}")
            cfg[norm] = value
    if out is None:
        raise ValueError("missing --out (or an 'out' entry in the config file)")
    cfg.update(given)
    return args.subcommand, cfg, out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        subcommand, cfg, out = resolve_config(args)
        if os.path.exists(out):
            raise FileExistsError(f"output directory already exists: {out}")
        os.makedirs(out)
        write_manifest(out, subcommand, {**cfg, "out": out})
        limit = int(os.environ.get(THREADS_ENV, "0") or "0")
        if limit > 0:
            with threadpool_limits(limits=limit):
                return COMMANDS[subcommand](cfg, out)
        return COMMANDS[subcommand](cfg, out)
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
