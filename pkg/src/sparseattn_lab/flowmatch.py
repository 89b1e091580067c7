"""Flow-matching samples, a small numpy transformer denoiser, and the two
training objectives: plain diffusion loss against v_t, and velocity
distillation against a frozen dense-attention teacher.

The denoiser is deliberately tiny and hand-differentiated. Architecture:
input projection plus fixed sinusoidal positions, sinusoidal time features
through a linear map, an optional class-embedding table, then pre-LN blocks
of {attention, two-layer GELU MLP}, and an output projection back to the
channel count. Attention routes through the same masked kernel in both
modes; dense mode just uses the full mask. Masks are rebuilt from the
current q/k on every forward and treated as constants by the backward pass.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .attention import attention_backward, full_mask, sparse_attention_with_mask
from .masker import BlockMask, SparsityConfig, expand_mask, hybrid_mask, pooled_map, top_k_mask
from .numerics import as_tensor, make_rng, read_spt2, softmax_rows, write_spt2

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


# ---------------------------------------------------------------------------
# Samples and datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FlowSample:
    x0: np.ndarray
    x1: np.ndarray
    t: float
    x_t: np.ndarray
    v_t: np.ndarray
    cond: int | None = None


def make_sample(x1, rng, t_schedule="uniform", cond: int | None = None) -> FlowSample:
    """Draw noise and a timestep, then interpolate: x_t = t*x1 + (1-t)*x0.

    t_schedule may be "uniform", a fixed float, or a callable taking rng.
    """
    x1 = as_tensor(x1, rank=2)
    x0 = rng.standard_normal(x1.shape)
    if t_schedule == "uniform":
        t = float(rng.uniform())
    elif callable(t_schedule):
        t = float(t_schedule(rng))
    else:
        t = float(t_schedule)
    return FlowSample(x0=x0, x1=x1, t=t, x_t=t * x1 + (1.0 - t) * x0, v_t=x1 - x0, cond=cond)


@dataclass(frozen=True)
class FieldDataset:
    """Clean latents: per-channel sinusoids over token position.

    With n_classes > 0 the class label shifts the base frequency, giving the
    conditioning pathway something real to do. `shift` moves the whole
    distribution (frequency offset plus amplitude change) and is how the
    fine-tuning-on-shifted-data experiments build their second distribution.
    """

    n_tokens: int
    channels: int
    n_classes: int = 0
    freq_base: float = 1.0
    freq_step: float = 0.5
    freq_jitter: float = 0.5
    amp: float = 1.0
    shift: float = 0.0

    def sample_clean(self, rng) -> tuple[np.ndarray, int | None]:
        cond = int(rng.integers(self.n_classes)) if self.n_classes > 0 else None
        pos = np.arange(self.n_tokens) / self.n_tokens
        x1 = np.zeros((self.n_tokens, self.channels))
        amp = self.amp * (1.0 + 0.5 * self.shift)
        for ch in range(self.channels):
            f = self.freq_base + self.shift + (cond or 0) * self.freq_step + rng.uniform(0, self.freq_jitter)
            phase = rng.uniform(0.0, 2.0 * math.pi)
            x1[:, ch] = amp * np.sin(2.0 * math.pi * f * pos + phase)
        return x1, cond

    def sample(self, rng, t_schedule="uniform") -> FlowSample:
        x1, cond = self.sample_clean(rng)
        return make_sample(x1, rng, t_schedule=t_schedule, cond=cond)

    def batch(self, rng, size: int, t_schedule="uniform") -> list[FlowSample]:
        return [self.sample(rng, t_schedule=t_schedule) for _ in range(size)]


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ArchConfig:
    n_tokens: int
    channels: int
    d_model: int
    n_layers: int
    n_classes: int = 0
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.d_model % 2 != 0:
            raise ValueError("d_model must be even (paired sin/cos features)")


@dataclass
class DenoiserModel:
    arch: ArchConfig
    params: dict[str, np.ndarray]
    attn_mode: str = "dense"  # "dense" | "sparse"
    sparsity: SparsityConfig | None = None

    def __post_init__(self):
        if self.attn_mode not in ("dense", "sparse"):
            raise ValueError(f"unknown attn_mode {self.attn_mode!r}")
        if self.attn_mode == "sparse" and self.sparsity is None:
            raise ValueError("sparse mode needs a SparsityConfig")

    def with_mode(self, attn_mode: str, sparsity: SparsityConfig | None = None) -> "DenoiserModel":
        """Same parameters, different attention operator."""
        return DenoiserModel(self.arch, self.params, attn_mode, sparsity)


def copy_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in params.items()}


def params_checksum(params: dict[str, np.ndarray]) -> float:
    return float(sum(np.abs(v).sum() for v in params.values()))


def init_params(arch: ArchConfig, seed: int) -> dict[str, np.ndarray]:
    rng = make_rng(seed)
    d, c = arch.d_model, arch.channels
    hidden = arch.mlp_ratio * d

    def lin(n_in, n_out):
        return rng.normal(scale=1.0 / math.sqrt(n_in), size=(n_in, n_out))

    p = {
        "in.w": lin(c, d),
        "in.b": np.zeros(d),
        "time.w": lin(d, d),
        "time.b": np.zeros(d),
        "out.w": lin(d, c),
        "out.b": np.zeros(c),
    }
    if arch.n_classes > 0:
        p["cond.emb"] = rng.normal(scale=0.5, size=(arch.n_classes, d))
    for i in range(arch.n_layers):
        p[f"blk{i}.ln1.g"] = np.ones(d)
        p[f"blk{i}.ln1.b"] = np.zeros(d)
        p[f"blk{i}.wq"] = lin(d, d)
        p[f"blk{i}.wk"] = lin(d, d)
        p[f"blk{i}.wv"] = lin(d, d)
        p[f"blk{i}.wo"] = lin(d, d)
        p[f"blk{i}.ln2.g"] = np.ones(d)
        p[f"blk{i}.ln2.b"] = np.zeros(d)
        p[f"blk{i}.mlp.w1"] = lin(d, hidden)
        p[f"blk{i}.mlp.b1"] = np.zeros(hidden)
        p[f"blk{i}.mlp.w2"] = lin(hidden, d)
        p[f"blk{i}.mlp.b2"] = np.zeros(d)
    return p


def make_model(arch: ArchConfig, seed: int, attn_mode: str = "dense",
               sparsity: SparsityConfig | None = None) -> DenoiserModel:
    return DenoiserModel(arch, init_params(arch, seed), attn_mode, sparsity)


def position_encoding(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    freqs = np.exp(-math.log(10000.0) * np.arange(d // 2) / (d // 2))
    ang = pos * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def time_features(t: float, d: int) -> np.ndarray:
    freqs = np.exp(np.linspace(0.0, math.log(1000.0), d // 2))
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def _gelu_grad(x):
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * _GELU_C * (1.0 + 3 * 0.044715 * x**2)


_LN_EPS = 1e-6


def _ln_forward(x, g, b):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    inv_std = 1.0 / np.sqrt((xc**2).mean(axis=1, keepdims=True) + _LN_EPS)
    xhat = xc * inv_std
    return g * xhat + b, (xhat, inv_std)


def _ln_backward(dy, g, cache):
    xhat, inv_std = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
    )
    return dx, dg, db


def _attn_mask_for(model: DenoiserModel, q, k) -> BlockMask:
    if model.attn_mode == "dense":
        return full_mask(q.shape[0])
    return hybrid_mask(pooled_map(q, k, model.sparsity), model.sparsity)


def _forward(model: DenoiserModel, x_t, t, cond, record=None):
    """Returns (velocity, cache). cache holds everything backward needs."""
    p = model.params
    arch = model.arch
    x_t = as_tensor(x_t, rank=2)
    if x_t.shape != (arch.n_tokens, arch.channels):
        raise ValueError(f"x_t shape {x_t.shape} != ({arch.n_tokens}, {arch.channels})")
    if arch.n_classes > 0 and cond is None:
        raise ValueError("model is class-conditional but cond is None")

    feats = time_features(float(t), arch.d_model)
    tvec = feats @ p["time.w"] + p["time.b"]
    h = x_t @ p["in.w"] + p["in.b"] + position_encoding(arch.n_tokens, arch.d_model) + tvec
    if arch.n_classes > 0:
        h = h + p["cond.emb"][cond]

    cache = {"x_t": x_t, "feats": feats, "cond": cond, "layers": []}
    for i in range(arch.n_layers):
        pre = f"blk{i}."
        a_in = h
        y1, ln1_cache = _ln_forward(a_in, p[pre + "ln1.g"], p[pre + "ln1.b"])
        q = y1 @ p[pre + "wq"]
        k = y1 @ p[pre + "wk"]
        v = y1 @ p[pre + "wv"]
        bm = _attn_mask_for(model, q, k)
        att = sparse_attention_with_mask(q, k, v, bm)
        if record is not None:
            record.append((q, k, bm))
        h = a_in + att.out @ p[pre + "wo"]

        m_in = h
        y2, ln2_cache = _ln_forward(m_in, p[pre + "ln2.g"], p[pre + "ln2.b"])
        u1 = y2 @ p[pre + "mlp.w1"] + p[pre + "mlp.b1"]
        g = _gelu(u1)
        h = m_in + g @ p[pre + "mlp.w2"] + p[pre + "mlp.b2"]
        cache["layers"].append(
            {"a_in": a_in, "y1": y1, "ln1": ln1_cache, "q": q, "k": k, "v": v, "bm": bm,
             "att_out": att.out, "m_in": m_in, "y2": y2, "ln2": ln2_cache, "u1": u1, "g": g}
        )
    cache["h_final"] = h
    return h @ p["out.w"] + p["out.b"], cache


def forward_denoiser(model: DenoiserModel, x_t, t, cond: int | None = None, record=None) -> np.ndarray:
    out, _ = _forward(model, x_t, t, cond, record=record)
    return out


def _backward(model: DenoiserModel, cache, d_out) -> dict[str, np.ndarray]:
    p = model.params
    grads = {k: np.zeros_like(v) for k, v in p.items()}

    grads["out.w"] += cache["h_final"].T @ d_out
    grads["out.b"] += d_out.sum(axis=0)
    dh = d_out @ p["out.w"].T

    for i in reversed(range(model.arch.n_layers)):
        pre = f"blk{i}."
        lc = cache["layers"][i]

        # h = m_in + gelu(LN2(m_in) @ w1 + b1) @ w2 + b2
        du2 = dh
        grads[pre + "mlp.w2"] += lc["g"].T @ du2
        grads[pre + "mlp.b2"] += du2.sum(axis=0)
        dg = du2 @ p[pre + "mlp.w2"].T
        du1 = dg * _gelu_grad(lc["u1"])
        grads[pre + "mlp.w1"] += lc["y2"].T @ du1
        grads[pre + "mlp.b1"] += du1.sum(axis=0)
        dy2 = du1 @ p[pre + "mlp.w1"].T
        dx, dg2, db2 = _ln_backward(dy2, p[pre + "ln2.g"], lc["ln2"])
        grads[pre + "ln2.g"] += dg2
        grads[pre + "ln2.b"] += db2
        dh = dh + dx

        # h = a_in + attention(LN1(a_in)) @ wo
        dz = dh
        grads[pre + "wo"] += lc["att_out"].T @ dz
        datt = dz @ p[pre + "wo"].T
        ag = attention_backward(lc["q"], lc["k"], lc["v"], lc["bm"], datt)
        grads[pre + "wq"] += lc["y1"].T @ ag.dq
        grads[pre + "wk"] += lc["y1"].T @ ag.dk
        grads[pre + "wv"] += lc["y1"].T @ ag.dv
        dy1 = ag.dq @ p[pre + "wq"].T + ag.dk @ p[pre + "wk"].T + ag.dv @ p[pre + "wv"].T
        dx, dg1, db1 = _ln_backward(dy1, p[pre + "ln1.g"], lc["ln1"])
        grads[pre + "ln1.g"] += dg1
        grads[pre + "ln1.b"] += db1
        dh = dh + dx

    grads["in.w"] += cache["x_t"].T @ dh
    grads["in.b"] += dh.sum(axis=0)
    dtvec = dh.sum(axis=0)
    grads["time.w"] += np.outer(cache["feats"], dtvec)
    grads["time.b"] += dtvec
    if model.arch.n_classes > 0:
        grads["cond.emb"][cache["cond"]] += dh.sum(axis=0)
    return grads


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def diffusion_loss(model: DenoiserModel, batch: list[FlowSample]) -> float:
    """Mean squared error of the predicted velocity against v_t, averaged
    over batch, tokens, and channels."""
    if not batch:
        raise ValueError("empty batch")
    total, count = 0.0, 0
    for s in batch:
        u = forward_denoiser(model, s.x_t, s.t, s.cond)
        total += float(((u - s.v_t) ** 2).sum())
        count += u.size
    return total / count


def vd_loss(student: DenoiserModel, teacher: DenoiserModel, batch: list[FlowSample]) -> float:
    """Mean squared difference between student and teacher velocities on the
    same (x_t, t, cond) draws. The samples' v_t labels never enter."""
    if teacher.attn_mode != "dense":
        raise ValueError("teacher must run dense attention")
    if not batch:
        raise ValueError("empty batch")
    total, count = 0.0, 0
    for s in batch:
        u_s = forward_denoiser(student, s.x_t, s.t, s.cond)
        u_t = forward_denoiser(teacher, s.x_t, s.t, s.cond)
        total += float(((u_s - u_t) ** 2).sum())
        count += u_s.size
    return total / count


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    checkpoint_every: int = 0
    out_dir: str | None = None


@dataclass(frozen=True)
class TrainStats:
    step: int
    loss: float
    layer_sparsity: tuple[float, ...]
    tau_bar: float
    grad_norm: float


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries the last finite parameter state."""

    def __init__(self, step: int, last_params: dict, history: list[TrainStats]):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.last_params = last_params
        self.history = history


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float):
        self.lr = lr
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        b1, b2 = ADAM_BETAS
        self.t += 1
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g**2
            params[k] -= self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + ADAM_EPS)


def _attn_stats(records) -> tuple[tuple[float, ...], float]:
    """Per-layer mean sparsity and mean retained mass of the used masks."""
    if not records:
        return (), 1.0
    n_layers = max(len(r) for r in records)
    sparsities = [[] for _ in range(n_layers)]
    taus = []
    for rec in records:
        for li, (q, k, bm) in enumerate(rec):
            sparsities[li].append(bm.sparsity())
            em = expand_mask(bm)
            probs = softmax_rows(q @ k.T / math.sqrt(q.shape[1]))
            taus.extend((probs * em).sum(axis=1))
    return tuple(float(np.mean(s)) for s in sparsities), float(np.mean(taus))


def measure_tau_bar(model: DenoiserModel, batch: list[FlowSample], cfg: SparsityConfig) -> float:
    """Mean retained mass under fixed-count top-k block masks rebuilt from
    the model's current attention inputs. The keep count never changes, so
    movements in this number are purely the model concentrating its
    attention into its top blocks."""
    taus = []
    for s in batch:
        rec = []
        forward_denoiser(model, s.x_t, s.t, s.cond, record=rec)
        for q, k, _ in rec:
            bm = top_k_mask(pooled_map(q, k, cfg), cfg.k_frac)
            em = expand_mask(bm)
            probs = softmax_rows(q @ k.T / math.sqrt(q.shape[1]))
            taus.extend((probs * em).sum(axis=1))
    return float(np.mean(taus))


def _run_training(model: DenoiserModel, data: FieldDataset, train_cfg: TrainConfig,
                  target_fn) -> list[TrainStats]:
    """Shared loop. target_fn(sample) -> the velocity target for that draw."""
    opt = Adam(model.params, train_cfg.lr)
    rng = make_rng(train_cfg.seed)
    history: list[TrainStats] = []
    last_good = copy_params(model.params)

    for step in range(train_cfg.steps):
        batch = data.batch(rng, train_cfg.batch_size)
        loss_sum, count = 0.0, 0
        grads = {k: np.zeros_like(v) for k, v in model.params.items()}
        records = []
        try:
            for s in batch:
                rec = []
                u, cache = _forward(model, s.x_t, s.t, s.cond, record=rec)
                records.append(rec)
                diff = u - target_fn(s)
                loss_sum += float((diff**2).sum())
                count += diff.size
                for k, g in _backward(model, cache, 2.0 * diff).items():
                    grads[k] += g
        except FloatingPointError:
            # Exploded activations trip the kernel's finiteness checks before
            # the loss itself goes NaN; both mean the same thing here.
            raise TrainingDiverged(step, last_good, history) from None
        loss = loss_sum / count
        for k in grads:
            grads[k] /= count

        if not math.isfinite(loss):
            raise TrainingDiverged(step, last_good, history)
        last_good = copy_params(model.params)

        grad_norm = math.sqrt(sum(float((g**2).sum()) for g in grads.values()))
        layer_sp, tau_bar = _attn_stats(records)
        history.append(TrainStats(step=step, loss=loss, layer_sparsity=layer_sp,
                                  tau_bar=tau_bar, grad_norm=grad_norm))
        opt.step(model.params, grads)

        if (train_cfg.checkpoint_every and train_cfg.out_dir
                and (step + 1) % train_cfg.checkpoint_every == 0):
            save_checkpoint(train_cfg.out_dir, model, step + 1, train_cfg.seed)
    return history


def train_diffusion(model: DenoiserModel, data: FieldDataset,
                    train_cfg: TrainConfig) -> tuple[DenoiserModel, list[TrainStats]]:
    history = _run_training(model, data, train_cfg, lambda s: s.v_t)
    return model, history


def train_vd(teacher: DenoiserModel, cfg: SparsityConfig, data: FieldDataset,
             train_cfg: TrainConfig) -> tuple[DenoiserModel, list[TrainStats]]:
    """Clone the teacher, swap in sparse attention, and fit the student's
    velocities to the frozen teacher's on shared noisy draws."""
    if teacher.attn_mode != "dense":
        raise ValueError("teacher must run dense attention")
    student = DenoiserModel(teacher.arch, copy_params(teacher.params), "sparse", cfg)

    def teacher_velocity(s: FlowSample) -> np.ndarray:
        return forward_denoiser(teacher, s.x_t, s.t, s.cond)

    history = _run_training(student, data, train_cfg, teacher_velocity)
    return student, history


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(out_dir, model: DenoiserModel, step: int, seed: int, tag: str = "ckpt") -> str:
    ck_dir = os.path.join(str(out_dir), f"{tag}_{step:06d}")
    os.makedirs(os.path.join(ck_dir, "params"), exist_ok=True)
    for k, v in model.params.items():
        write_spt2(os.path.join(ck_dir, "params", f"{k}.spt2"), v)
    manifest = {
        "version": __version__,
        "arch": vars(model.arch) | {},
        "attn_mode": model.attn_mode,
        "sparsity": vars(model.sparsity) | {} if model.sparsity else None,
        "step": step,
        "seed": seed,
        "params": sorted(model.params),
    }
    with open(os.path.join(ck_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return ck_dir


def load_checkpoint(ck_dir) -> tuple[DenoiserModel, dict]:
    with open(os.path.join(str(ck_dir), "manifest.json")) as f:
        manifest = json.load(f)
    arch = ArchConfig(**manifest["arch"])
    params = {
        k: read_spt2(os.path.join(str(ck_dir), "params", f"{k}.spt2"))
        for k in manifest["params"]
    }
    sparsity = SparsityConfig(**manifest["sparsity"]) if manifest["sparsity"] else None
    return DenoiserModel(arch, params, manifest["attn_mode"], sparsity), manifest
