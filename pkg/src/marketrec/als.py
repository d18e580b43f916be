"""Implicit-feedback alternating least squares factorization.

Interactions are treated as binary preferences with confidence grown by the
observed weight: preference p = 1 for every stored cell, confidence
c = 1 + alpha * weight.  Each half-step solves an exact per-row ridge
system, so the regularized objective never increases.

Also fits user x postcode co-visitation factors, which give each postcode a
dense location embedding.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from marketrec.events import EventLog, InteractionMatrix

INIT_SCALE = 0.01
# objective may wiggle by float rounding; anything above this is a real increase
OBJECTIVE_SLACK = 1e-6


@dataclass
class FactorModel:
    """Row (user) and column (item or postcode) factors with training metadata."""

    row_ids: tuple[str, ...]
    col_ids: tuple[str, ...]
    row_factors: np.ndarray
    col_factors: np.ndarray
    dim: int
    reg: float
    alpha: float
    objective_history: tuple[float, ...] = field(default=())

    def __post_init__(self) -> None:
        if self.row_factors.shape != (len(self.row_ids), self.dim):
            raise ValueError(
                f"row factors shape {self.row_factors.shape} does not match "
                f"({len(self.row_ids)}, {self.dim})"
            )
        if self.col_factors.shape != (len(self.col_ids), self.dim):
            raise ValueError(
                f"col factors shape {self.col_factors.shape} does not match "
                f"({len(self.col_ids)}, {self.dim})"
            )

    @functools.cached_property
    def row_index(self) -> dict[str, int]:
        return {r: i for i, r in enumerate(self.row_ids)}

    @functools.cached_property
    def col_index(self) -> dict[str, int]:
        return {c: i for i, c in enumerate(self.col_ids)}


def implicit_objective(
    X: np.ndarray, Y: np.ndarray, mat: sp.csr_matrix, alpha: float, reg: float
) -> float:
    """Confidence-weighted squared error over ALL user-item cells plus L2.

    sum_{u,i} c_ui (p_ui - x_u.y_i)^2 + reg * (||X||^2 + ||Y||^2), with
    p = 1 and c = 1 + alpha*w on stored cells, p = 0 and c = 1 elsewhere.
    Uses the Gram identity so the dense sum costs O((U+I) d^2 + nnz d).
    """
    gram_y = Y.T @ Y
    total = float(np.sum((X @ gram_y) * X))  # sum over all cells of (x.y)^2
    coo = mat.tocoo()
    rows, cols, w = coo.row, coo.col, coo.data
    s = np.sum(X[rows] * Y[cols], axis=1)
    total += float(np.sum((1.0 + alpha * w) * (1.0 - s) ** 2 - s * s))
    total += reg * (float(np.sum(X * X)) + float(np.sum(Y * Y)))
    return total


def solve_half_step(
    mat_rows: sp.csr_matrix, other: np.ndarray, alpha: float, reg: float
) -> np.ndarray:
    """Exact per-row ridge solve holding the other side fixed.

    For each row u with observed columns J and weights w:
        (G + alpha * Y_J^T diag(w) Y_J + reg I) x_u = Y_J^T (1 + alpha w)
    where G = Y^T Y.  Rows without observations get the zero vector, which
    is exactly optimal for an all-zero preference row.
    """
    n_rows = mat_rows.shape[0]
    dim = other.shape[1]
    gram = other.T @ other
    reg_eye = reg * np.eye(dim)
    out = np.zeros((n_rows, dim))
    indptr, indices, data = mat_rows.indptr, mat_rows.indices, mat_rows.data
    for u in range(n_rows):
        lo, hi = indptr[u], indptr[u + 1]
        if lo == hi:
            continue
        cols = indices[lo:hi]
        w = data[lo:hi]
        Yj = other[cols]
        A = gram + reg_eye + (Yj.T * (alpha * w)) @ Yj
        b = Yj.T @ (1.0 + alpha * w)
        out[u] = np.linalg.solve(A, b)
    return out


def _als(
    mat: sp.csr_matrix,
    row_ids: Sequence[str],
    col_ids: Sequence[str],
    dim: int,
    reg: float,
    alpha: float,
    iterations: int,
    seed: int,
    init_rows: np.ndarray | None = None,
    init_cols: np.ndarray | None = None,
) -> FactorModel:
    if dim < 1:
        raise ValueError(f"factor dim must be >= 1, got {dim}")
    if reg <= 0:
        raise ValueError(f"regularization must be positive, got {reg}")
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    if mat.nnz == 0:
        raise ValueError("cannot factorize an empty interaction matrix")
    rng = np.random.default_rng(seed)
    X = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(mat.shape[0], dim)) if init_rows is None else init_rows.copy()
    Y = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(mat.shape[1], dim)) if init_cols is None else init_cols.copy()
    mat_t = mat.T.tocsr()
    history = [implicit_objective(X, Y, mat, alpha, reg)]
    for _ in range(iterations):
        X = solve_half_step(mat, Y, alpha, reg)
        history.append(implicit_objective(X, Y, mat, alpha, reg))
        Y = solve_half_step(mat_t, X, alpha, reg)
        history.append(implicit_objective(X, Y, mat, alpha, reg))
    for prev, cur in zip(history, history[1:]):
        if cur > prev + OBJECTIVE_SLACK * max(1.0, abs(prev)):
            raise RuntimeError(
                f"ALS objective increased from {prev!r} to {cur!r}; "
                "the half-step solver is broken"
            )
    return FactorModel(
        row_ids=tuple(row_ids),
        col_ids=tuple(col_ids),
        row_factors=X,
        col_factors=Y,
        dim=dim,
        reg=reg,
        alpha=alpha,
        objective_history=tuple(history),
    )


def als_fit(
    interactions: InteractionMatrix,
    dim: int = 32,
    reg: float = 0.1,
    alpha: float = 40.0,
    iterations: int = 15,
    seed: int = 0,
) -> FactorModel:
    """Factorize a weighted user x item matrix into user and item factors."""
    return _als(
        interactions.matrix,
        interactions.user_ids,
        interactions.item_ids,
        dim=dim,
        reg=reg,
        alpha=alpha,
        iterations=iterations,
        seed=seed,
    )


def behavioral_item_embeddings(model: FactorModel) -> dict[str, np.ndarray]:
    """Column factors keyed by item id."""
    return {item: model.col_factors[i].copy() for i, item in enumerate(model.col_ids)}


def location_embeddings(
    log: EventLog,
    item_postcodes: Mapping[str, str],
    dim: int = 8,
    reg: float = 0.1,
    alpha: float = 40.0,
    iterations: int = 15,
    seed: int = 0,
) -> dict[str, np.ndarray]:
    """Postcode embeddings from the user x postcode co-visitation matrix.

    Every event is mapped through its item's postcode and counted; the same
    implicit factorization then yields one dense vector per postcode.
    """
    if len(log) == 0:
        raise ValueError("cannot fit location embeddings on an empty log")
    missing = sorted({e.item_id for e in log} - set(item_postcodes))
    if missing:
        raise ValueError(f"items without a postcode: {', '.join(missing[:5])}")
    postcodes = tuple(sorted({item_postcodes[e.item_id] for e in log}))
    pc_index = {p: i for i, p in enumerate(postcodes)}
    rows = [log.user_index[e.user_id] for e in log]
    cols = [pc_index[item_postcodes[e.item_id]] for e in log]
    mat = sp.csr_matrix(
        (np.ones(len(log)), (rows, cols)),
        shape=(len(log.users), len(postcodes)),
    )
    mat.sum_duplicates()
    model = _als(mat, log.users, postcodes, dim, reg, alpha, iterations, seed)
    return {p: model.col_factors[i].copy() for i, p in enumerate(postcodes)}


def mf_recommend(
    model: FactorModel,
    user_id: str,
    exclude: set[str] | frozenset[str] = frozenset(),
    top_n: int = 10,
) -> list[tuple[str, float]]:
    """Top-n items by user.item factor dot product, excluding given items.

    Ties break toward the lexicographically smaller item id so output order
    is fully deterministic.
    """
    if top_n < 1:
        raise ValueError(f"top_n must be >= 1, got {top_n}")
    row_index = model.row_index
    if user_id not in row_index:
        raise ValueError(f"unknown user {user_id!r}")
    scores = model.col_factors @ model.row_factors[row_index[user_id]]
    col_index = model.col_index
    order = sorted(
        (item for item in model.col_ids if item not in exclude),
        key=lambda it: (-scores[col_index[it]], it),
    )
    return [(it, float(scores[col_index[it]])) for it in order[:top_n]]
