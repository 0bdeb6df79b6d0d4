"""Coordinate-ascent variational inference for the categorical block model."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .cells import ObservedCells, block_soft_counts, ordered_sum
from .core import Priors, VariationalState, dirichlet_kl, expected_log_dirichlet
from .data import CategoricalMatrix, WeightMatrix

logger = logging.getLogger(__name__)

PHI_FLOOR = 1e-300


class NumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class FitConfig:
    max_iters: int = 500
    tol: float = 1e-4
    tol_mode: str = "absolute"
    # None: moving-average stopping iff the weights are inverse-propensity weights
    weighted: Optional[bool] = None
    moving_avg_window: int = 5
    deterministic_reduction: bool = False

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.tol_mode not in ("absolute", "relative"):
            raise ValueError("tol_mode must be 'absolute' or 'relative'")
        if self.moving_avg_window < 1:
            raise ValueError("moving_avg_window must be >= 1")


@dataclass
class FitReport:
    elbo_trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    wall_time: float = 0.0
    # minibatch steps taken (SVI only); iterations counts ELBO evaluations
    steps: int = 0

    def to_dict(self) -> dict:
        return {"elbo_trace": [float(x) for x in self.elbo_trace], "iterations": self.iterations,
                "converged": self.converged, "wall_time": self.wall_time, "steps": self.steps}


def normalize_log_weights(logits: np.ndarray, what: str = "row") -> np.ndarray:
    bad = ~np.isfinite(logits)
    if bad.any():
        i, k = np.argwhere(bad)[0]
        raise NumericalError(f"non-finite log-weight for {what} {i}, cluster {k}")
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def _dense_col_sums(cells: ObservedCells, phi_row: np.ndarray) -> np.ndarray:
    onehot = cells.dense_weighted_onehot()  # (C, N, M)
    contrib = onehot.transpose(1, 2, 0)[:, :, None, :] * phi_row[:, None, :, None]
    return ordered_sum(contrib)  # (M, K, C)


def row_log_weights(state: VariationalState, cells: ObservedCells, rows=None,
                    deterministic: bool = False) -> np.ndarray:
    """Unnormalized log q(g_i = k) for the given rows."""
    elog = expected_log_dirichlet(state.gamma_block)
    H = cells.row_sums(state.phi_col, rows)
    K, L, C = elog.shape
    if deterministic:
        data = (H[:, None, :, :] * elog[None]).sum(axis=(2, 3))
    else:
        data = H.reshape(H.shape[0], L * C) @ elog.reshape(K, L * C).T
    return data + expected_log_dirichlet(state.gamma_row)


def col_log_weights(state: VariationalState, cells: ObservedCells, cols=None,
                    deterministic: bool = False) -> np.ndarray:
    """Unnormalized log q(h_j = l) for the given columns."""
    elog = expected_log_dirichlet(state.gamma_block)
    if deterministic:
        G = _dense_col_sums(cells, state.phi_row)
        if cols is not None:
            G = G[np.asarray(cols)]
        data = (G[:, :, None, :] * elog[None]).sum(axis=(1, 3))
    else:
        G = cells.col_sums(state.phi_row, cols)
        K, L, C = elog.shape
        data = G.reshape(G.shape[0], K * C) @ elog.transpose(0, 2, 1).reshape(K * C, L)
    return data + expected_log_dirichlet(state.gamma_col)


def _rows(state, cells, deterministic=False):
    return normalize_log_weights(row_log_weights(state, cells, None, deterministic), "row")


def _cols(state, cells, deterministic=False):
    return normalize_log_weights(col_log_weights(state, cells, None, deterministic), "column")


def _globals(state, cells, priors, deterministic=False):
    sum0 = ordered_sum if deterministic else (lambda a: a.sum(axis=0))
    counts = block_soft_counts(cells, state.phi_row, state.phi_col, deterministic)
    return (priors.alpha_row + sum0(state.phi_row),
            priors.alpha_col + sum0(state.phi_col),
            priors.alpha_block + counts)


def _neg_entropy_terms(phi: np.ndarray, elog_prop: np.ndarray) -> np.ndarray:
    # per-line E[log p(z | pi)] - E[log q(z)]
    plogp = np.where(phi > 0, phi * np.log(np.maximum(phi, PHI_FLOOR)), 0.0)
    return phi @ elog_prop - plogp.sum(axis=1)


def _elbo(state, cells, priors, deterministic=False) -> float:
    sum0 = ordered_sum if deterministic else (lambda a: a.sum(axis=0))
    elog_block = expected_log_dirichlet(state.gamma_block)
    counts = block_soft_counts(cells, state.phi_row, state.phi_col, deterministic)
    loglik = float(np.sum(counts * elog_block))
    rows = float(sum0(_neg_entropy_terms(state.phi_row, expected_log_dirichlet(state.gamma_row))))
    cols = float(sum0(_neg_entropy_terms(state.phi_col, expected_log_dirichlet(state.gamma_col))))
    kl_row = dirichlet_kl(state.gamma_row, np.full(state.K, priors.alpha_row))
    kl_col = dirichlet_kl(state.gamma_col, np.full(state.L, priors.alpha_col))
    kl_block = float(np.sum(dirichlet_kl(state.gamma_block,
                                         np.full(state.gamma_block.shape, priors.alpha_block))))
    elbo = loglik + rows + cols - kl_row - kl_col - kl_block
    if not np.isfinite(elbo):
        raise NumericalError("ELBO is not finite")
    return elbo


def update_rows(state: VariationalState, data: CategoricalMatrix,
                weights: Optional[WeightMatrix] = None, priors: Priors = Priors(),
                deterministic: bool = False) -> np.ndarray:
    """Optimal q(g) given everything else; returns the new (N, K) soft assignments."""
    return _rows(state, ObservedCells.build(data, weights), deterministic)


def update_cols(state: VariationalState, data: CategoricalMatrix,
                weights: Optional[WeightMatrix] = None, priors: Priors = Priors(),
                deterministic: bool = False) -> np.ndarray:
    return _cols(state, ObservedCells.build(data, weights), deterministic)


def update_globals(state: VariationalState, data: CategoricalMatrix,
                   weights: Optional[WeightMatrix] = None, priors: Priors = Priors(),
                   deterministic: bool = False) -> tuple:
    """Returns (gamma_row, gamma_col, gamma_block) given the current soft assignments."""
    return _globals(state, ObservedCells.build(data, weights), priors, deterministic)


def compute_elbo(state: VariationalState, data: CategoricalMatrix,
                 weights: Optional[WeightMatrix] = None, priors: Priors = Priors(),
                 deterministic: bool = False) -> float:
    """Evidence lower bound with the likelihood term weighted over observed cells."""
    return _elbo(state, ObservedCells.build(data, weights), priors, deterministic)


def sweep(state: VariationalState, cells: ObservedCells, priors: Priors,
          deterministic: bool = False) -> VariationalState:
    """One rows -> columns -> globals pass."""
    state = state.copy()
    state.phi_row = _rows(state, cells, deterministic)
    state.phi_col = _cols(state, cells, deterministic)
    state.gamma_row, state.gamma_col, state.gamma_block = _globals(state, cells, priors, deterministic)
    return state


def has_converged(trace, tol: float, tol_mode: str = "absolute", moving_window: int = 0) -> bool:
    """Stopping rule on an ELBO trace.

    With ``moving_window`` > 0 the mean absolute change over the last
    ``moving_window`` steps is compared with ``tol``; otherwise the last
    improvement is.
    """
    if len(trace) < 2:
        return False
    scale = abs(trace[-1]) if tol_mode == "relative" else 1.0
    if moving_window:
        if len(trace) < moving_window + 1:
            return False
        return float(np.mean(np.abs(np.diff(trace[-moving_window - 1:])))) < tol * scale
    return trace[-1] - trace[-2] < tol * scale


def fit(data: CategoricalMatrix, weights: Optional[WeightMatrix], priors: Priors,
        K: int, L: int, init: VariationalState, config: FitConfig = FitConfig(),
        cells: Optional[ObservedCells] = None) -> tuple:
    """Run CAVI sweeps from ``init`` until the ELBO stops improving.

    Returns ``(state, FitReport)``; hitting ``max_iters`` is reported through
    ``converged=False``.
    """
    if (init.K, init.L, init.N, init.M) != (K, L, data.n_rows, data.n_cols):
        raise ValueError("init state is not shape-compatible with the data and (K, L)")
    if init.n_cat != data.n_cat:
        raise ValueError("init state has a different category count than the data")
    if cells is None:
        cells = ObservedCells.build(data, weights)
    weighted = config.weighted
    if weighted is None:
        weighted = weights is not None and weights.mode == "inverse-propensity"
    window = config.moving_avg_window if weighted else 0
    det = config.deterministic_reduction
    start = time.perf_counter()
    state = init.copy()
    report = FitReport()
    for it in range(config.max_iters):
        state = sweep(state, cells, priors, det)
        report.elbo_trace.append(_elbo(state, cells, priors, det))
        report.iterations = it + 1
        if has_converged(report.elbo_trace, config.tol, config.tol_mode, window):
            report.converged = True
            break
    report.wall_time = time.perf_counter() - start
    logger.info("CAVI: %d sweeps, ELBO %.6f, converged=%s", report.iterations,
                report.elbo_trace[-1], report.converged)
    return state, report
