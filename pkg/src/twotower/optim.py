"""Slot-fused moment accumulation and the factorized decoupled-decay step.

Plain gradient accumulation materializes the batch-mean gradient before the
optimizer sees it, which costs a weight-sized buffer per tensor. Here the
K microbatch gradients c_1..c_K stream straight into the moment slots:

    first moment   i=1:  v1 <- beta1 * v1 + ((1-beta1)/K) * c_1
                   i>1:  v1 <- v1        + ((1-beta1)/K) * c_i

which telescopes to exactly beta1 * v1 + (1-beta1) * mean_i(c_i), the
vanilla update on the accumulated mean, with no extra accumulator.

The second moment wants mean(c)^2, but streaming only offers mean(c^2) and
E[c_i^2] = gbar^2 + Var(c_i) * (K-1)/K in expectation over the microbatch
noise. Each contribution is therefore debiased with an estimate of Var(c_i)
taken across the R replica copies of the microbatch gradient (unbiased
sample variance over replicas, divided by R), clamped at zero:

    u_i = max(0, c_i^2 - ((K-1)/K) * Varhat_i),   v2 accumulates u_i/K

For matrix weights the second moment is stored factorized (row sums r and
column sums c with reconstruction r_i c_j / sum(r)); accumulation is linear
so the fused scheme applies to r and c directly. Vector weights keep a full
v2. First moments can optionally live on the bf16 storage grid (rounded
after every write, widened to float64 for use).

The parameter step is decoupled-decay:  theta <- theta * (1 - lr * wd) - lr * v1 / sqrt(v2hat + 1e-30).
No bias correction, no relative step sizes, no update clipping.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import ShapeError, UpdateSequenceError, VarianceUnestimableError

ROOT_EPS = 1e-30


class ReplicaGrads:
    """Per-replica gradient copies d_1..d_R for one microbatch."""

    def __init__(self, grads: list[dict[str, np.ndarray]]):
        if not grads:
            raise ValueError("need at least one replica gradient")
        names = set(grads[0])
        for d in grads[1:]:
            if set(d) != names:
                raise ShapeError("replica gradients disagree on weight names")
            for k in names:
                if d[k].shape != grads[0][k].shape:
                    raise ShapeError(f"replica shapes disagree for {k!r}")
        self.grads = grads

    def __len__(self) -> int:
        return len(self.grads)

    def names(self):
        return self.grads[0].keys()


def estimate_microbatch_variance(rg: ReplicaGrads, m: int) -> dict[str, np.ndarray]:
    """Elementwise estimate of Var(c_i), the microbatch-mean gradient variance.

    c_i is the mean of the R replica values, so Var(c_i) = Var(d)/R; Var(d)
    is estimated by the unbiased (R-1)-divisor sample variance across
    replicas. In expectation this equals Var(g)/M for per-example gradient
    variance Var(g). Needs R >= 2.
    """
    r = len(rg)
    if r < 2:
        raise VarianceUnestimableError(
            f"variance needs >= 2 replicas, got {r}"
        )
    if m % r:
        raise ShapeError(f"replicas {r} must divide microbatch size {m}")
    out = {}
    for name in rg.names():
        stack = [d[name] for d in rg.grads]
        mean = sum(stack) / r
        ss = sum((d - mean) ** 2 for d in stack)
        out[name] = ss / (r - 1) / r
    return out


@dataclass
class MomentSlots:
    """Moment storage for one weight tensor, with fused-sequence guards.

    Matrix weights get a factorized second moment (row/col sums); vectors a
    full one. `seq_v1`/`seq_v2` hold (expected_next_i, K) while a fused
    K-sequence is in flight and None when complete.
    """

    v1: np.ndarray
    beta1: float
    beta2: float
    v2: np.ndarray | None = None
    v2_row: np.ndarray | None = None
    v2_col: np.ndarray | None = None
    precision_emulation: bool = False
    seq_v1: tuple | None = field(default=None, repr=False)
    seq_v2: tuple | None = field(default=None, repr=False)

    @classmethod
    def create(cls, shape, beta1: float, beta2: float,
               precision_emulation: bool = False,
               factor_matrices: bool = True) -> "MomentSlots":
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        v1 = np.zeros(shape, dtype=np.float64)
        if len(shape) == 2 and factor_matrices:
            return cls(v1, beta1, beta2,
                       v2_row=np.zeros(shape[0], dtype=np.float64),
                       v2_col=np.zeros(shape[1], dtype=np.float64),
                       precision_emulation=precision_emulation)
        return cls(v1, beta1, beta2, v2=np.zeros(shape, dtype=np.float64),
                   precision_emulation=precision_emulation)

    @property
    def factored(self) -> bool:
        return self.v2 is None

    def elems(self) -> int:
        n = self.v1.size
        n += self.v2.size if self.v2 is not None else self.v2_row.size + self.v2_col.size
        return n

    def second_moment(self) -> np.ndarray:
        """Materialize v2hat (reconstructed from factors when factorized)."""
        if not self.factored:
            return self.v2
        total = float(np.sum(self.v2_row))
        if total <= 0.0:
            return np.zeros((self.v2_row.size, self.v2_col.size))
        return np.outer(self.v2_row, self.v2_col) / total


def _advance(seq: tuple | None, i: int, k: int, what: str) -> tuple | None:
    """Validate the fused-sequence position (i of K) and advance it."""
    if not (1 <= i <= k):
        raise UpdateSequenceError(f"{what}: index {i} outside 1..{k}")
    if i == 1:
        if seq is not None:
            raise UpdateSequenceError(
                f"{what}: new sequence started before the previous one finished"
            )
    else:
        if seq is None:
            raise UpdateSequenceError(f"{what}: contribution {i}/{k} without a start")
        expected_i, expected_k = seq
        if k != expected_k:
            raise UpdateSequenceError(
                f"{what}: K changed mid-sequence ({expected_k} -> {k})"
            )
        if i != expected_i:
            raise UpdateSequenceError(
                f"{what}: expected contribution {expected_i}, got {i}"
            )
    return None if i == k else (i + 1, k)


def fused_v1_update(slots: MomentSlots, c_i: np.ndarray, i: int, k: int):
    """Fold microbatch gradient c_i (contribution i of K) into v1 in place."""
    if c_i.shape != slots.v1.shape:
        raise ShapeError(f"gradient shape {c_i.shape} != slot {slots.v1.shape}")
    slots.seq_v1 = _advance(slots.seq_v1, i, k, "fused v1")
    scale = (1.0 - slots.beta1) / k
    if i == 1:
        slots.v1 *= slots.beta1
    slots.v1 += scale * c_i
    if slots.precision_emulation:
        # storage stays on the bf16 grid; reads use the widened values
        slots.v1[...] = nm.round_to_bf16_storage(slots.v1)


def fused_v2_update(slots: MomentSlots, c_i: np.ndarray,
                    var_i: np.ndarray | None, i: int, k: int):
    """Fold the debiased square of c_i into the second-moment slots.

    var_i is the between-replica estimate of Var(c_i) (None disables the
    finite-K correction; with K == 1 the correction factor is zero anyway).
    """
    if c_i.shape != slots.v1.shape:
        raise ShapeError(f"gradient shape {c_i.shape} != slot {slots.v1.shape}")
    slots.seq_v2 = _advance(slots.seq_v2, i, k, "fused v2")
    u = c_i * c_i
    if var_i is not None:
        if var_i.shape != c_i.shape:
            raise ShapeError("variance estimate shape mismatch")
        u = np.maximum(0.0, u - ((k - 1.0) / k) * var_i)
    scale = (1.0 - slots.beta2) / k
    if slots.factored:
        ru = nm.row_sum(u)
        cu = nm.col_sum(u)
        if i == 1:
            slots.v2_row *= slots.beta2
            slots.v2_col *= slots.beta2
        slots.v2_row += scale * ru
        slots.v2_col += scale * cu
    else:
        if i == 1:
            slots.v2 *= slots.beta2
        slots.v2 += scale * u


def make_slots(weights: dict[str, np.ndarray], beta1: float, beta2: float,
               precision_emulation: bool = False,
               factor_matrices: bool = True) -> dict[str, MomentSlots]:
    return {
        name: MomentSlots.create(w.shape, beta1, beta2, precision_emulation,
                                 factor_matrices)
        for name, w in weights.items()
    }


def adafactorw_step(weights: dict[str, np.ndarray],
                    slots: dict[str, MomentSlots], lr: float,
                    weight_decay: float = 0.0):
    """Apply theta <- theta * (1 - lr*wd) - lr * v1 / sqrt(v2hat + 1e-30).

    In place on every weight present in `slots`. Decay touches only the
    weights, never the slots; with a zero gradient history the update term
    is exactly zero and decay shrinks theta by the exact factor (1 - lr*wd).
    Refuses to run while a fused sequence is incomplete.
    """
    if lr < 0.0 or weight_decay < 0.0:
        raise ValueError("lr and weight_decay must be >= 0")
    for name, s in slots.items():
        if s.seq_v1 is not None or s.seq_v2 is not None:
            raise UpdateSequenceError(
                f"{name}: fused sequence incomplete at step time"
            )
        w = weights[name]
        if w.shape != s.v1.shape:
            raise ShapeError(f"{name}: weight shape {w.shape} != slot shape")
        update = s.v1 / np.sqrt(s.second_moment() + ROOT_EPS)
        w[...] = w * (1.0 - lr * weight_decay) - lr * update
