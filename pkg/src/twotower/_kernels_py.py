"""Pure numpy fallback kernels, bitwise-equivalent to the compiled core.

Each function replays the compiled kernels' exact IEEE-754 operation sequence:
accumulation starts at +0.0 and adds one product/term per ascending inner
index. Vectorizing across the output elements is safe because rounding is
elementwise; only the per-element operation ORDER matters for bitwise
equality, and that order is identical.
"""

import numpy as np


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product, summation in ascending inner-index order."""
    n, k = a.shape
    kb, m = b.shape
    if kb != k:
        raise ValueError(f"matmul inner dimensions differ: ({n},{k}) @ ({kb},{m})")
    out = np.zeros((n, m), dtype=np.float64)
    for p in range(k):
        # out[i,j] += a[i,p] * b[p,j]: multiply rounds once, add rounds once,
        # matching the compiled loop compiled with fp-contract off.
        out += a[:, p : p + 1] * b[p : p + 1, :]
    return out


def row_sum(a: np.ndarray) -> np.ndarray:
    """Per-row sum in ascending column order, accumulated from 0.0."""
    n, d = a.shape
    out = np.zeros(n, dtype=np.float64)
    for j in range(d):
        out += a[:, j]
    return out
