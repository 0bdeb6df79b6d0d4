"""Sparse storage of observed cells and the accumulation kernels used by inference.

Observed cells are stored twice, grouped by row (CSR-like) and by column
(CSC-like), each entry carrying its category code and importance weight.
The kernels never copy the data, so a minibatch step touches memory
proportional to the batch only.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np

if "NUMBA_THREADING_LAYER" not in os.environ:
    # the system TBB is too old for numba; avoid the fallback warning
    numba.config.THREADING_LAYER = "workqueue"

from .data import CategoricalMatrix, WeightMatrix, observed_weights


@numba.njit(parallel=True, cache=True)
def _accumulate(ptr, other, code, weight, lines, phi_other, keep, out):
    # out[r, a, c] += w * phi_other[other, a] over the entries of line lines[r]
    n_lines = lines.shape[0]
    width = phi_other.shape[1]
    for r in numba.prange(n_lines):
        line = lines[r]
        for p in range(ptr[line], ptr[line + 1]):
            o = other[p]
            if not keep[o]:
                continue
            c = code[p]
            w = weight[p]
            for a in range(width):
                out[r, a, c] += w * phi_other[o, a]


@dataclass(frozen=True)
class ObservedCells:
    n_rows: int
    n_cols: int
    n_cat: int
    row_ptr: np.ndarray
    row_col: np.ndarray
    row_code: np.ndarray
    row_w: np.ndarray
    col_ptr: np.ndarray
    col_row: np.ndarray
    col_code: np.ndarray
    col_w: np.ndarray

    @classmethod
    def build(cls, data: CategoricalMatrix, weights: Optional[WeightMatrix] = None) -> "ObservedCells":
        if weights is None:
            weights = observed_weights(data)
        w = weights.weights
        if w.shape != data.shape:
            raise ValueError("weight matrix shape does not match the data")
        if np.any(w[~data.mask] != 0):
            raise ValueError("weights must vanish on unobserved cells")
        n, m = data.shape
        ii, jj = np.nonzero(data.mask)
        codes = data.codes[ii, jj]
        ww = w[ii, jj]
        row_ptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(ii, minlength=n), out=row_ptr[1:])
        order = np.lexsort((ii, jj))
        col_ptr = np.zeros(m + 1, dtype=np.int64)
        np.cumsum(np.bincount(jj, minlength=m), out=col_ptr[1:])
        return cls(n, m, data.n_cat,
                   row_ptr, jj.astype(np.int64), codes.astype(np.int64), ww.astype(np.float64),
                   col_ptr, ii[order].astype(np.int64), codes[order].astype(np.int64),
                   ww[order].astype(np.float64))

    @property
    def total_weight(self) -> float:
        return float(self.row_w.sum())

    def row_sums(self, phi_col: np.ndarray, rows=None, col_keep=None) -> np.ndarray:
        """H[r, l, c] = sum_j w_ij 1(c_ij = c) phi_col[j, l] for the given rows."""
        rows = np.arange(self.n_rows) if rows is None else np.asarray(rows, dtype=np.int64)
        keep = np.ones(self.n_cols, dtype=np.bool_) if col_keep is None else col_keep
        out = np.zeros((rows.size, phi_col.shape[1], self.n_cat))
        _accumulate(self.row_ptr, self.row_col, self.row_code, self.row_w, rows,
                    np.ascontiguousarray(phi_col), keep, out)
        return out

    def col_sums(self, phi_row: np.ndarray, cols=None) -> np.ndarray:
        """G[r, k, c] = sum_i w_ij 1(c_ij = c) phi_row[i, k] for the given columns."""
        cols = np.arange(self.n_cols) if cols is None else np.asarray(cols, dtype=np.int64)
        keep = np.ones(self.n_rows, dtype=np.bool_)
        out = np.zeros((cols.size, phi_row.shape[1], self.n_cat))
        _accumulate(self.col_ptr, self.col_row, self.col_code, self.col_w, cols,
                    np.ascontiguousarray(phi_row), keep, out)
        return out

    def dense_weighted_onehot(self) -> np.ndarray:
        """(n_cat, N, M) array of w_ij 1(c_ij = c); small problems only."""
        out = np.zeros((self.n_cat, self.n_rows, self.n_cols))
        rows = np.repeat(np.arange(self.n_rows), np.diff(self.row_ptr))
        out[self.row_code, rows, self.row_col] = self.row_w
        return out


def ordered_sum(x: np.ndarray) -> np.ndarray:
    """Sum over axis 0 in an order that does not depend on the input ordering."""
    return np.sort(x, axis=0).sum(axis=0)


def block_soft_counts(cells: ObservedCells, phi_row: np.ndarray, phi_col: np.ndarray,
                      deterministic: bool = False) -> np.ndarray:
    """Weighted soft counts S[k, l, c] = sum_ij w_ij phi_row[i,k] phi_col[j,l] 1(c_ij=c)."""
    H = cells.row_sums(phi_col)
    K = phi_row.shape[1]
    if deterministic:
        return ordered_sum(phi_row[:, :, None, None] * H[:, None, :, :])
    n, L, C = H.shape
    return (phi_row.T @ H.reshape(n, L * C)).reshape(K, L, C)
