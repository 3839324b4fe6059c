"""Compressed-row adjacency, degree normalization and seeded randomness."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatch, DuplicateEdge, IndexOutOfBounds, NegativeWeight

__all__ = [
    "SparseAdjacency",
    "build_csr",
    "sym_degree_normalize",
    "make_rng",
    "scatter_rows",
]


@dataclass(frozen=True, eq=False)
class SparseAdjacency:
    """Immutable weighted adjacency in compressed sparse row layout.

    ``row_offsets[r]:row_offsets[r + 1]`` delimits the stored entries of row
    ``r``; column indices are strictly increasing within a row.
    """

    n_rows: int
    n_cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        for name in ("row_offsets", "col_indices", "values"):
            getattr(self, name).setflags(write=False)

    @property
    def nnz(self) -> int:
        return int(self.row_offsets[-1])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    def row(self, r: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.row_offsets[r], self.row_offsets[r + 1]
        return self.col_indices[lo:hi], self.values[lo:hi]

    def row_ids(self) -> np.ndarray:
        """Row index of every stored entry (COO row array)."""
        return np.repeat(np.arange(self.n_rows), np.diff(self.row_offsets))

    def row_counts(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.row_ids(), self.col_indices] = self.values
        return out

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (self.values, self.col_indices, self.row_offsets), shape=self.shape
        )

    def transpose(self) -> "SparseAdjacency":
        return from_scipy(self.to_scipy().T)

    def edges(self) -> list[tuple[int, int, float]]:
        return list(
            zip(self.row_ids().tolist(), self.col_indices.tolist(), self.values.tolist())
        )

    def __eq__(self, other):
        if not isinstance(other, SparseAdjacency):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.row_offsets, other.row_offsets)
            and np.array_equal(self.col_indices, other.col_indices)
            and np.array_equal(self.values, other.values)
        )

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "SparseAdjacency":
        dense = np.asarray(dense, dtype=np.float64)
        rows, cols = np.nonzero(dense)
        return _from_sorted_coo(rows, cols, dense[rows, cols], *dense.shape)

    @classmethod
    def empty(cls, n_rows: int, n_cols: int) -> "SparseAdjacency":
        return _from_sorted_coo(
            np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0), n_rows, n_cols
        )


def _from_sorted_coo(rows, cols, vals, n_rows, n_cols) -> SparseAdjacency:
    counts = np.bincount(rows, minlength=n_rows) if len(rows) else np.zeros(n_rows, np.int64)
    offsets = np.zeros(n_rows + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return SparseAdjacency(
        int(n_rows),
        int(n_cols),
        offsets,
        np.ascontiguousarray(cols, dtype=np.int64),
        np.ascontiguousarray(vals, dtype=np.float64),
    )


def from_scipy(mat: sp.spmatrix) -> SparseAdjacency:
    """Canonicalize a scipy matrix; explicit zeros are kept as stored entries."""
    coo = sp.coo_matrix(mat)
    order = np.lexsort((coo.col, coo.row))
    return _from_sorted_coo(
        coo.row[order].astype(np.int64), coo.col[order].astype(np.int64),
        coo.data[order].astype(np.float64), *coo.shape,
    )


def build_csr(
    edges: Iterable[Sequence[float]] | np.ndarray, n_rows: int, n_cols: int
) -> SparseAdjacency:
    """Build a canonical adjacency from ``(row, col, weight)`` triples.

    Raises
    ------
    IndexOutOfBounds
        If any row or column falls outside the declared shape.
    DuplicateEdge
        If a ``(row, col)`` pair appears more than once.
    """
    arr = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.float64)
    if arr.size == 0:
        return SparseAdjacency.empty(n_rows, n_cols)
    arr = arr.reshape(-1, 3)
    rows = arr[:, 0].astype(np.int64)
    cols = arr[:, 1].astype(np.int64)
    if not (np.array_equal(rows, arr[:, 0]) and np.array_equal(cols, arr[:, 1])):
        raise IndexOutOfBounds("row/col indices must be integers")
    bad = (rows < 0) | (rows >= n_rows) | (cols < 0) | (cols >= n_cols)
    if bad.any():
        k = int(np.argmax(bad))
        raise IndexOutOfBounds(
            f"edge ({rows[k]}, {cols[k]}) outside {n_rows}x{n_cols} adjacency"
        )
    order = np.lexsort((cols, rows))
    rows, cols, vals = rows[order], cols[order], arr[order, 2]
    dup = (rows[1:] == rows[:-1]) & (cols[1:] == cols[:-1])
    if dup.any():
        k = int(np.argmax(dup))
        raise DuplicateEdge(f"edge ({rows[k]}, {cols[k]}) given more than once")
    return _from_sorted_coo(rows, cols, vals, n_rows, n_cols)


def sym_degree_normalize(adj: SparseAdjacency) -> SparseAdjacency:
    """Return ``D^-1/2 A D^-1/2`` with ``D_ii`` the row sums of ``A``.

    Entries touching a zero-degree node become 0 instead of NaN.
    """
    if adj.n_rows != adj.n_cols:
        raise DimensionMismatch(f"degree normalization needs a square matrix, got {adj.shape}")
    if np.any(adj.values < 0):
        raise NegativeWeight("degree normalization requires nonnegative weights")
    deg = np.bincount(adj.row_ids(), weights=adj.values, minlength=adj.n_rows)
    inv_sqrt = np.zeros_like(deg)
    pos = deg > 0
    inv_sqrt[pos] = 1.0 / np.sqrt(deg[pos])
    vals = adj.values * inv_sqrt[adj.row_ids()] * inv_sqrt[adj.col_indices]
    return SparseAdjacency(
        adj.n_rows, adj.n_cols, adj.row_offsets.copy(), adj.col_indices.copy(), vals
    )


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 stream; identical output for equal seeds on any platform."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def scatter_rows(idx, values: np.ndarray, n_rows: int) -> np.ndarray:
    """``out[idx[e]] += values[e]`` for every ``e``, as one sparse product."""
    idx = np.asarray(idx, dtype=np.int64).ravel()
    if len(idx) == 0:
        return np.zeros((n_rows,) + values.shape[1:])
    flat = values.reshape(len(idx), -1)
    sc = sp.csr_matrix((np.ones(len(idx)), (idx, np.arange(len(idx)))), shape=(n_rows, len(idx)))
    return np.asarray(sc @ flat).reshape((n_rows,) + values.shape[1:])
