"""Synthetic matrices drawn from the block model, with planted ground truth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import BinMeta, CategoricalMatrix


@dataclass(frozen=True)
class PlantedModel:
    data: CategoricalMatrix
    row_labels: np.ndarray
    col_labels: np.ndarray
    block_probs: np.ndarray  # (K, L, n_cat)

    def loglik(self) -> float:
        """Exact log-likelihood of the observed cells under the planted model."""
        d = self.data
        p = self.block_probs[self.row_labels[:, None], self.col_labels[None, :], d.codes]
        with np.errstate(divide="ignore"):
            return float(np.log(p[d.mask]).sum())

    def to_dict(self) -> dict:
        return {"row_labels": self.row_labels.tolist(), "col_labels": self.col_labels.tolist(),
                "block_probs": self.block_probs.tolist()}


def _planted_labels(rng, n: int, k: int) -> np.ndarray:
    labels = rng.integers(0, k, size=n)
    labels[:k] = np.arange(k)
    return labels


def default_bins(m: int, chromosomes=None, bin_size: int = 500_000) -> tuple:
    """Consecutive fixed-width bins spread evenly over ``chromosomes``."""
    if chromosomes is None:
        chromosomes = ["chr1"]
    per = int(np.ceil(m / len(chromosomes)))
    meta = []
    for j in range(m):
        chrom = chromosomes[j // per]
        start = (j % per) * bin_size
        meta.append(BinMeta(f"{chrom}:{start}-{start + bin_size}", chrom, start, start + bin_size))
    return tuple(meta)


def sample_block_model(N: int, M: int, K: int, L: int, n_cat: int, sharpness: float = 0.9,
                       seed=None, chromosomes=None) -> PlantedModel:
    """Draw a fully observed matrix from a planted categorical block model.

    Each block puts mass ``sharpness`` on a randomly chosen modal code and
    spreads the remainder evenly over the other codes. The first K rows (L
    columns) are assigned to clusters 0..K-1 so that no cluster is empty.
    """
    if K > N or L > M:
        raise ValueError("need K <= N and L <= M")
    if not 0.0 < sharpness <= 1.0:
        raise ValueError("sharpness must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    g = _planted_labels(rng, N, K)
    h = _planted_labels(rng, M, L)
    modes = rng.integers(0, n_cat, size=(K, L))
    probs = np.full((K, L, n_cat), (1.0 - sharpness) / (n_cat - 1))
    np.put_along_axis(probs, modes[:, :, None], sharpness, axis=2)
    # inverse-CDF draw per cell from its block distribution
    cdf = np.cumsum(probs, axis=2)
    cdf[:, :, -1] = 1.0
    u = rng.random((N, M))
    codes = np.empty((N, M), dtype=np.int64)
    step = max(1, 2_000_000 // (M * n_cat))
    for lo in range(0, N, step):
        rows = slice(lo, lo + step)
        cell_cdf = cdf[g[rows, None], h[None, :]]
        codes[rows] = (u[rows, :, None] >= cell_cdf).sum(axis=2)
    codes = np.minimum(codes, n_cat - 1)
    data = CategoricalMatrix(codes, np.ones((N, M), dtype=bool), n_cat,
                             col_meta=default_bins(M, chromosomes))
    return PlantedModel(data, g, h, probs)


def apply_mcar_mask(data: CategoricalMatrix, rate: float, seed=None) -> CategoricalMatrix:
    """Hide each cell independently with probability ``rate``; codes are kept."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("mask rate must lie in [0, 1)")
    if rate == 0.0:
        return data
    rng = np.random.default_rng(seed)
    hidden = rng.random(data.shape) < rate
    return data.with_mask(data.mask & ~hidden)


@dataclass(frozen=True)
class PlantedDecomposition:
    data: CategoricalMatrix
    main_labels: np.ndarray
    residual_labels: np.ndarray
    main_codes: np.ndarray


def sample_main_residual(N: int = 300, M: int = 600, n_main: int = 4, n_residual: int = 3,
                         n_segments: int = 6, n_cat: int = 12, flip: float = 0.03,
                         shift_width: int = 100, seed=None, chromosomes=None
                         ) -> PlantedDecomposition:
    """Planted main blocks with an independent residual row partition on top.

    Main structure: each main row group has a constant code on each of
    ``n_segments`` contiguous column segments. Residual group 0 carries no
    deviation; group r > 0 deviates by +1 (odd r) or -1 (even r) on its own
    block of ``shift_width`` columns. A fraction ``flip`` of cells is then
    replaced by a uniformly random code.
    """
    rng = np.random.default_rng(seed)
    g = _planted_labels(rng, N, n_main)
    r = _planted_labels(rng, N, n_residual)
    rng.shuffle(r)
    seg = np.minimum(np.arange(M) * n_segments // M, n_segments - 1)
    # interior codes keep +/-1 deviations inside the alphabet
    modes = rng.integers(1, n_cat - 1, size=(n_main, n_segments))
    main = modes[g][:, seg]
    codes = main.copy()
    if (n_residual - 1) * shift_width > M:
        raise ValueError("residual regions do not fit in the columns")
    offsets = np.linspace(0, M - shift_width, max(n_residual - 1, 1)).astype(int)
    for grp in range(1, n_residual):
        cols = slice(offsets[grp - 1], offsets[grp - 1] + shift_width)
        sign = 1 if grp % 2 else -1
        rows = r == grp
        codes[rows, cols] += sign
    noisy = rng.random((N, M)) < flip
    codes[noisy] = rng.integers(0, n_cat, size=int(noisy.sum()))
    data = CategoricalMatrix(codes, np.ones((N, M), dtype=bool), n_cat,
                             col_meta=default_bins(M, chromosomes))
    return PlantedDecomposition(data, g, r, main)
