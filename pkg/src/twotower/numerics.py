"""Deterministic float64 primitives: the arithmetic bedrock of the package.

All tensors are numpy float64 arrays in row-major layout with rows as
examples. Three properties are load-bearing for everything built on top:

  1. Fixed evaluation order. matmul and the row/column reductions pin the
     order in which terms are added (ascending inner index, from +0.0), so a
     value computed on a slice of a batch is bitwise equal to the same rows of
     the full-batch result, and reruns are bitwise reproducible. BLAS is never
     used on these paths.
  2. Finiteness. Public operations reject NaN/Inf rather than propagate it.
  3. Seeded, splittable randomness. Rng wraps a counter-based Philox stream;
     child streams are derived from (seed, path of stream ids) so independent
     consumers never share or race a stream.
"""

from __future__ import annotations

import numpy as np

from . import backend
from .errors import DegenerateEmbeddingError, NonFiniteError, ShapeError

# Rows whose L2 norm falls below this cannot be meaningfully projected onto
# the unit sphere.
DEGENERATE_NORM_FLOOR = 1e-30


def ensure_finite(arr: np.ndarray, context: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{context}: non-finite entries")
    return arr


def as_tensor(data, context: str = "tensor") -> np.ndarray:
    """Coerce to a float64 array and validate finiteness."""
    arr = np.asarray(data, dtype=np.float64)
    return ensure_finite(arr, context)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a @ b with the fixed ascending-inner-index summation order."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = backend.matmul(a, b)
    return ensure_finite(out, "matmul")


def row_sum(a: np.ndarray) -> np.ndarray:
    """Sum over columns (one value per row), ascending column order."""
    if a.ndim != 2:
        raise ShapeError(f"row_sum expects a 2-D operand, got {a.shape}")
    return backend.row_sum(a)


def col_sum(a: np.ndarray) -> np.ndarray:
    """Sum over rows (one value per column), ascending row order.

    Implemented as row_sum on the transposed view, which walks the original
    rows in ascending order; no copy, same pinned arithmetic.
    """
    if a.ndim != 2:
        raise ShapeError(f"col_sum expects a 2-D operand, got {a.shape}")
    return backend.row_sum(a.T)


def row_norms(a: np.ndarray) -> np.ndarray:
    """Per-row L2 norm with fixed-order accumulation of the squares."""
    return np.sqrt(row_sum(a * a))


def l2_normalize_rows(a: np.ndarray) -> np.ndarray:
    """Project each row onto the unit sphere.

    Raises DegenerateEmbeddingError if any row norm is below 1e-30; dividing
    by such a norm would manufacture direction out of rounding noise.
    """
    ensure_finite(a, "l2_normalize_rows input")
    norms = row_norms(a)
    if a.shape[0] and norms.min() < DEGENERATE_NORM_FLOOR:
        bad = int(np.argmin(norms))
        raise DegenerateEmbeddingError(
            f"row {bad} has norm {norms[bad]:.3e} < {DEGENERATE_NORM_FLOOR:g}"
        )
    return a / norms[:, None]


def round_to_bf16_storage(a: np.ndarray) -> np.ndarray:
    """Round float64 values to an 8-bit significand (brain-float storage).

    Round-to-nearest, ties to even, applied directly to the float64 mantissa:
    the low 45 of the 52 mantissa bits are cleared after adding the rounding
    increment, leaving 7 explicit + 1 implicit significand bits. Idempotent;
    preserves zero and sign; relative error at most 2**-8 for normal-range
    inputs. Exponent range is not narrowed (values are stored widened, as
    float64), which is the storage-emulation contract, not full IEEE bf16.
    """
    arr = as_tensor(a, "round_to_bf16_storage input")
    bits = np.ascontiguousarray(arr).view(np.uint64)
    keep = np.uint64(45)  # mantissa bits dropped: 52 - 7
    one = np.uint64(1)
    half = (one << (keep - one)) - one  # 0x0FFF_FFFF_FFFF >> 1 style half-ulp - 1
    lsb = (bits >> keep) & one  # ties go to even: add the kept lsb
    rounded = (bits + half + lsb) & ~((one << keep) - one)
    return rounded.view(np.float64).reshape(arr.shape).copy()


class Rng:
    """Counter-based splittable random stream.

    Philox keyed by (seed, stream path): Rng(7).split("data", 3) and
    Rng(7).split("data", 3) yield bitwise-identical streams in any process,
    and distinct paths yield statistically independent streams. Draws are
    float64 (or int64 for integers).
    """

    def __init__(self, seed: int, _path: tuple = ()):
        self.seed = int(seed)
        self.path = _path
        # SeedSequence hashes the path into the Philox key; entropy is the
        # user seed so the whole tree is reproducible from one integer.
        key = np.random.SeedSequence(entropy=self.seed, spawn_key=_path)
        self._gen = np.random.Generator(np.random.Philox(key))

    def split(self, *ids) -> "Rng":
        """Child stream at path + ids. Strings are folded to stable ints."""
        folded = tuple(_fold_id(i) for i in ids)
        return Rng(self.seed, self.path + folded)

    def normal(self, shape, loc: float = 0.0, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(loc, scale, size=shape).astype(np.float64, copy=False)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape).astype(np.float64, copy=False)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def _fold_id(i) -> int:
    if isinstance(i, (int, np.integer)):
        return int(i)
    if isinstance(i, str):
        # Stable across processes (unlike hash()): fold utf-8 bytes.
        acc = 0
        for byte in i.encode("utf-8"):
            acc = (acc * 257 + byte) % (2**63)
        return acc
    raise TypeError(f"stream id must be int or str, got {type(i).__name__}")
