"""Dense float64 tensor helpers: matmul, row softmax, block pooling, RNG, file I/O.

Everything downstream works on plain C-contiguous float64 numpy arrays.
Public operations validate that results stay finite; NaN/Inf is treated as
an error state, never returned silently.
"""

from __future__ import annotations

import struct

import numpy as np

SPT2_MAGIC = b"SPT2"


class ShapeError(ValueError):
    """Operand dimensions are incompatible."""


def as_tensor(x, rank: int | None = None) -> np.ndarray:
    """Coerce to a C-contiguous float64 array, optionally enforcing rank."""
    a = np.ascontiguousarray(x, dtype=np.float64)
    if rank is not None and a.ndim != rank:
        raise ShapeError(f"expected rank {rank}, got rank {a.ndim} with shape {a.shape}")
    return a


def ensure_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dense product of two rank-2 tensors in float64."""
    a = as_tensor(a, rank=2)
    b = as_tensor(b, rank=2)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dims mismatch: {a.shape} x {b.shape}")
    ensure_finite(a, "matmul lhs")
    ensure_finite(b, "matmul rhs")
    return a @ b


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction; every output row sums to 1."""
    x = as_tensor(x, rank=2)
    ensure_finite(x, "softmax input")
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def block_mean_pool(x: np.ndarray, block: int) -> np.ndarray:
    """Mean over consecutive groups of `block` rows; a ragged final group is
    averaged over its actual row count."""
    x = as_tensor(x, rank=2)
    if block < 1:
        raise ValueError(f"block must be >= 1, got {block}")
    n = x.shape[0]
    starts = np.arange(0, n, block)
    sums = np.add.reduceat(x, starts, axis=0)
    counts = np.minimum(starts + block, n) - starts
    return sums / counts[:, None]


def num_blocks(n: int, block: int) -> int:
    return -(-n // block)


# ---------------------------------------------------------------------------
# Deterministic random generation
# ---------------------------------------------------------------------------
# PCG64 is a fixed published algorithm; numpy guarantees that a given seed
# produces a bit-identical stream on every platform.

def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def child_seeds(seed: int, n: int) -> list[int]:
    """Derive n independent 64-bit seeds from one root seed."""
    return [int(s.generate_state(1, np.uint64)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def write_spt2(path, x: np.ndarray) -> None:
    """SPT2 binary tensor: magic 'SPT2', u32-le rank, u32-le extents, f64-le
    row-major payload."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    with open(path, "wb") as f:
        f.write(SPT2_MAGIC)
        f.write(struct.pack("<I", x.ndim))
        for extent in x.shape:
            f.write(struct.pack("<I", extent))
        f.write(x.astype("<f8", copy=False).tobytes(order="C"))


def read_spt2(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != SPT2_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {SPT2_MAGIC!r}")
        (rank,) = struct.unpack("<I", f.read(4))
        dims = struct.unpack(f"<{rank}I", f.read(4 * rank))
        if any(d < 1 for d in dims):
            raise ValueError(f"{path}: non-positive extent in {dims}")
        count = int(np.prod(dims)) if rank else 1
        payload = f.read(8 * count)
        if len(payload) != 8 * count:
            raise ValueError(f"{path}: truncated payload ({len(payload)} bytes, wanted {8 * count})")
        extra = f.read(1)
        if extra:
            raise ValueError(f"{path}: trailing bytes after payload")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)


def format_float(v: float) -> str:
    """Shortest round-trip decimal form; stable across reruns."""
    return repr(float(v))


def write_csv_tensor(path, x: np.ndarray) -> None:
    """Rank-2 tensor as CSV with a `c0,c1,...` header row."""
    x = as_tensor(x, rank=2)
    with open(path, "w", newline="") as f:
        f.write(",".join(f"c{j}" for j in range(x.shape[1])) + "\n")
        for row in x:
            f.write(",".join(format_float(v) for v in row) + "\n")


def read_csv_tensor(path) -> np.ndarray:
    with open(path, "r", newline="") as f:
        header = f.readline().strip()
        cols = header.split(",")
        if not all(c == f"c{j}" for j, c in enumerate(cols)):
            raise ValueError(f"{path}: bad CSV tensor header {header!r}")
        rows = [[float(v) for v in line.strip().split(",")] for line in f if line.strip()]
    if not rows:
        raise ValueError(f"{path}: empty CSV tensor")
    x = np.array(rows, dtype=np.float64)
    if x.shape[1] != len(cols):
        raise ValueError(f"{path}: ragged rows")
    return x


def read_tensor(path) -> np.ndarray:
    """Dispatch on extension: .spt2 binary or .csv."""
    p = str(path)
    if p.endswith(".spt2"):
        return read_spt2(p)
    if p.endswith(".csv"):
        return read_csv_tensor(p)
    raise ValueError(f"unknown tensor file extension: {p}")
