"""Held-out prediction scores, cluster purity and partition agreement."""

from __future__ import annotations

import numpy as np

from .core import HardAssignments
from .data import CategoricalMatrix, HoldoutSplit

PROB_FLOOR = 1e-10


def block_counts(data: CategoricalMatrix, hard: HardAssignments, n_cat: int,
                 K: int = None, L: int = None) -> np.ndarray:
    """Observed-cell counts n[k, l, c] under hard assignments."""
    K = int(hard.g.max()) + 1 if K is None else K
    L = int(hard.h.max()) + 1 if L is None else L
    ii, jj = np.nonzero(data.mask)
    flat = (hard.g[ii] * L + hard.h[jj]) * n_cat + data.codes[ii, jj]
    return np.bincount(flat, minlength=K * L * n_cat).reshape(K, L, n_cat).astype(np.float64)


def empirical_blocks(data: CategoricalMatrix, hard: HardAssignments, n_cat: int,
                     K: int = None, L: int = None) -> np.ndarray:
    """Per-block code frequencies over observed cells; empty blocks are uniform."""
    counts = block_counts(data, hard, n_cat, K, L)
    totals = counts.sum(axis=2, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        probs = np.where(totals > 0, counts / totals, 1.0 / n_cat)
    return probs


def _heldout_probs(split: HoldoutSplit, hard: HardAssignments, blocks: np.ndarray) -> np.ndarray:
    cells = np.asarray(split.heldout_cells)
    i, j = cells[:, 0], cells[:, 1]
    return blocks[hard.g[i], hard.h[j]]


def heldout_loglik(split: HoldoutSplit, hard: HardAssignments, blocks: np.ndarray) -> float:
    """Sum of log predicted probabilities of the held-out codes (floored at 1e-10)."""
    if len(split) == 0:
        return 0.0
    p = _heldout_probs(split, hard, blocks)
    truth = np.asarray(split.heldout_cells)[:, 2]
    return float(np.log(np.maximum(p[np.arange(truth.size), truth], PROB_FLOOR)).sum())


def heldout_accuracy(split: HoldoutSplit, hard: HardAssignments, blocks: np.ndarray) -> float:
    if len(split) == 0:
        raise ValueError("accuracy is undefined on an empty held-out set")
    p = _heldout_probs(split, hard, blocks)
    truth = np.asarray(split.heldout_cells)[:, 2]
    return float(np.mean(np.argmax(p, axis=1) == truth))


def weighted_entropy(data: CategoricalMatrix, hard: HardAssignments, n_cat: int) -> float:
    """Block entropies normalized by log(n_cat), averaged with observed-cell weights."""
    counts = block_counts(data, hard, n_cat)
    totals = counts.sum(axis=2)
    total = totals.sum()
    if total == 0:
        return 0.0
    with np.errstate(invalid="ignore", divide="ignore"):
        p = counts / totals[:, :, None]
        terms = np.where(counts > 0, p * np.log(p), 0.0)
    H = -terms.sum(axis=2) / np.log(n_cat)
    return float(np.sum(totals / total * H))


def adjusted_rand_index(a, b) -> float:
    """Adjusted Rand index from the pair-counting contingency table."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError("label vectors must have equal length")
    n = a.size
    if n < 2:
        return 1.0
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)

    def pairs(x):
        x = np.asarray(x, dtype=np.float64)
        return float(np.sum(x * (x - 1) / 2))

    index = pairs(table)
    sum_a = pairs(table.sum(axis=1))
    sum_b = pairs(table.sum(axis=0))
    expected = sum_a * sum_b / (n * (n - 1) / 2)
    max_index = (sum_a + sum_b) / 2
    if max_index == expected:
        return 1.0
    return (index - expected) / (max_index - expected)
