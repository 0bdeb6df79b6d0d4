"""Two-stage decomposition into main variation and residual variation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .cavi import FitConfig, FitReport, fit
from .core import Priors, VariationalState, map_assignments
from .data import BinMeta, CategoricalMatrix, make_weights
from .initialize import initialize

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StageConfig:
    K: int
    L: int
    priors: Priors = Priors()
    init: str = "spectral"
    spectral_variant: str = "log"
    seed: int = 0
    restarts: int = 1
    weights: str = "none"
    fit: FitConfig = FitConfig()


def fit_stage(data: CategoricalMatrix, cfg: StageConfig) -> tuple:
    """Initialize and fit; with restarts > 1 the best final ELBO wins (seeds seed, seed+1, ...)."""
    weights = make_weights(data, cfg.weights)
    best = None
    for r in range(cfg.restarts):
        init = initialize(data, cfg.K, cfg.L, cfg.init, cfg.seed + r, cfg.priors, weights,
                          cfg.spectral_variant)
        state, report = fit(data, weights, cfg.priors, cfg.K, cfg.L, init, cfg.fit)
        if best is None or report.elbo_trace[-1] > best[1].elbo_trace[-1]:
            best = (state, report)
    return best


def main_matrix(data: CategoricalMatrix, state: VariationalState) -> np.ndarray:
    """Per-cell block mode under the MAP partition."""
    hard = map_assignments(state)
    modes = np.argmax(state.gamma_block, axis=2)
    return modes[hard.g[:, None], hard.h[None, :]]


@dataclass(frozen=True)
class Residual:
    signed: np.ndarray
    offset: int
    categorical: CategoricalMatrix


def residual(data: CategoricalMatrix, main: np.ndarray) -> Residual:
    """Signed deviations from the main matrix, shifted into a categorical alphabet.

    Unobserved cells get residual 0 and stay masked.
    """
    main = np.asarray(main)
    if main.shape != data.shape:
        raise ValueError("main matrix shape does not match the data")
    signed = np.where(data.mask, data.codes - main, 0)
    obs = signed[data.mask]
    lo = int(obs.min()) if obs.size else 0
    hi = int(obs.max()) if obs.size else 0
    offset = -lo
    n_cat = max(2, hi - lo + 1)
    codes = np.where(data.mask, signed + offset, 0)
    cat = CategoricalMatrix(codes, data.mask, n_cat, data.row_ids, data.col_meta)
    return Residual(signed, offset, cat)


def chromosome_filter(*chromosomes: str) -> Callable[[BinMeta], bool]:
    names = set(chromosomes)
    return lambda b: b.chromosome in names


@dataclass
class Decomposition:
    main: np.ndarray
    residual_signed: np.ndarray
    residual_offset: int
    residual_cat: CategoricalMatrix
    stage1: VariationalState
    stage2: VariationalState
    excluded_cols: list
    kept_rows: np.ndarray
    stage1_report: FitReport = field(default_factory=FitReport)
    stage2_report: FitReport = field(default_factory=FitReport)

    def assignment_table(self, data: CategoricalMatrix) -> list:
        """(row_id, stage1_cluster, stage2_cluster or None) for every input row."""
        g1 = map_assignments(self.stage1).g
        g2 = np.full(data.n_rows, -1)
        g2[self.kept_rows] = map_assignments(self.stage2).g
        return [(rid, int(a), None if b < 0 else int(b))
                for rid, a, b in zip(data.row_ids, g1, g2)]


def two_stage(data: CategoricalMatrix, cfg1: StageConfig, cfg2: StageConfig,
              exclude: Optional[Callable[[BinMeta], bool]] = None,
              min_cluster_rows: int = 0) -> Decomposition:
    """Fit the main model, subtract its block modes, fit the residual model.

    ``exclude`` drops matching bins from the second stage only. With
    ``min_cluster_rows`` > 0, rows of stage-1 clusters smaller than that are
    left out of the residual fit.
    """
    stage1, report1 = fit_stage(data, cfg1)
    main = main_matrix(data, stage1)
    res = residual(data, main)

    kept = np.arange(data.n_rows)
    if min_cluster_rows > 0:
        g = map_assignments(stage1).g
        sizes = np.bincount(g, minlength=stage1.K)
        kept = np.flatnonzero(sizes[g] >= min_cluster_rows)
        logger.info("dropping %d rows in stage-1 clusters below %d members",
                    data.n_rows - kept.size, min_cluster_rows)

    excluded = []
    if exclude is not None:
        if data.col_meta is None:
            raise ValueError("column exclusion needs bin metadata")
        excluded = [j for j, b in enumerate(data.col_meta) if exclude(b)]
    keep_cols = np.setdiff1d(np.arange(data.n_cols), excluded)
    stage2_data = res.categorical.select_rows(kept).select_columns(keep_cols)
    stage2, report2 = fit_stage(stage2_data, cfg2)
    return Decomposition(main, res.signed, res.offset, stage2_data, stage1, stage2,
                         excluded, kept, report1, report2)
