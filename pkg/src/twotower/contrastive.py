"""Symmetric in-batch contrastive loss over a similarity grid.

Given image embeddings X and text embeddings Y (rows on the unit sphere),
A = X Y^T / tau holds every pairwise similarity. The loss is softmax
cross-entropy against the diagonal, averaged over rows (image-to-text) and
columns (text-to-image) with equal weight:

    loss = 1/2 * [ mean_i (LSE(A[i,:]) - A[i,i]) + mean_j (LSE(A[:,j]) - A[j,j]) ]

Log-sum-exp is max-shifted; exponentials never exceed 1, so no overflow for
any finite similarity scale. A uniform A gives loss == ln(B) exactly and a
1x1 grid gives 0: the loss measures nothing but the diagonal's contrast
against its row and column.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from .errors import ShapeError


def similarity_matrix(x: np.ndarray, y: np.ndarray, tau: float) -> np.ndarray:
    """A[i, j] = <x_i, y_j> / tau for row-major embedding blocks."""
    if tau <= 0.0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if x.ndim != 2 or y.ndim != 2 or x.shape != y.shape:
        raise ShapeError(f"embedding blocks must match: {x.shape} vs {y.shape}")
    return nm.matmul(x, y.T) / tau


def _check_square(a: np.ndarray) -> int:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"similarity grid must be square, got {a.shape}")
    if a.shape[0] < 1:
        raise ShapeError("similarity grid must have at least one row")
    return a.shape[0]


def _row_lse(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1)
    return m + np.log(nm.row_sum(np.exp(a - m[:, None])))


def contrastive_loss(a: np.ndarray) -> float:
    """Mean row + column softmax cross-entropy against the diagonal."""
    b = _check_square(a)
    diag = np.diagonal(a)
    row_term = np.sum(_row_lse(a) - diag) / b
    col_term = np.sum(_row_lse(a.T) - diag) / b
    return float(0.5 * (row_term + col_term))


def _softmax_rows(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1)
    ex = np.exp(a - m[:, None])
    return ex / nm.row_sum(ex)[:, None]


def loss_grad_wrt_a(a: np.ndarray) -> np.ndarray:
    """d(contrastive_loss)/dA: (P_row - I)/(2B) + (P_col - I)/(2B).

    P_row is the row softmax, P_col the column softmax. Every row of the
    first term and every column of the second sums to zero, so the full
    gradient has zero total mass.
    """
    b = _check_square(a)
    eye = np.eye(b)
    p_row = _softmax_rows(a)
    p_col = _softmax_rows(a.T).T
    return (p_row - eye) / (2 * b) + (p_col - eye) / (2 * b)


def grads_to_embeddings(da: np.ndarray, x: np.ndarray, y: np.ndarray,
                        tau: float):
    """Chain dA back to the embedding blocks: dX = dA Y / tau, dY = dA^T X / tau."""
    b = _check_square(da)
    if x.shape[0] != b or y.shape[0] != b:
        raise ShapeError("embedding blocks do not match the gradient grid")
    dx = nm.matmul(da, y) / tau
    dy = nm.matmul(da.T, x) / tau
    return dx, dy
