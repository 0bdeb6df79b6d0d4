"""Stochastic variational inference with minibatches of rows and columns."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .cavi import FitReport, _elbo, col_log_weights, has_converged, normalize_log_weights, row_log_weights
from .cells import ObservedCells
from .core import Priors, VariationalState
from .data import CategoricalMatrix, WeightMatrix

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SviConfig:
    batch_rows: int
    batch_cols: int
    tau: float = 1.0
    kappa: float = 0.7
    max_steps: int = 2000
    eval_every: int = 10
    tol: float = 1e-6
    tol_mode: str = "relative"
    window: int = 5

    def __post_init__(self):
        if self.batch_rows < 1 or self.batch_cols < 1:
            raise ValueError("batch sizes must be >= 1")
        if not 0.5 < self.kappa <= 1.0:
            raise ValueError("kappa must lie in (0.5, 1]")
        if self.tau < 0:
            raise ValueError("tau must be non-negative")
        if self.max_steps < 1 or self.eval_every < 1 or self.window < 1:
            raise ValueError("max_steps, eval_every and window must be >= 1")
        if self.tol <= 0:
            raise ValueError("tol must be positive")


def step_size(t: int, tau: float = 1.0, kappa: float = 0.7) -> float:
    """Robbins-Monro schedule (t + tau) ** -kappa."""
    return float((t + tau) ** (-kappa))


def blend(old: np.ndarray, new: np.ndarray, eta: float) -> np.ndarray:
    return (1.0 - eta) * old + eta * new


def intermediate_globals(state: VariationalState, cells: ObservedCells, priors: Priors,
                         rows: np.ndarray, cols: np.ndarray) -> tuple:
    """Batch estimates of the global parameters, rescaled to the full matrix."""
    n, m = cells.n_rows, cells.n_cols
    row_scale = n / rows.size
    col_scale = m / cols.size
    keep = np.zeros(m, dtype=np.bool_)
    keep[cols] = True
    phi_r = state.phi_row[rows]
    H = cells.row_sums(state.phi_col, rows, keep)
    R, L, C = H.shape
    counts = (phi_r.T @ H.reshape(R, L * C)).reshape(state.K, L, C)
    return (priors.alpha_row + row_scale * phi_r.sum(axis=0),
            priors.alpha_col + col_scale * state.phi_col[cols].sum(axis=0),
            priors.alpha_block + (row_scale * col_scale) * counts)


def _step_inplace(state, cells, priors, rows, cols, eta):
    state.phi_row[rows] = normalize_log_weights(row_log_weights(state, cells, rows), "row")
    state.phi_col[cols] = normalize_log_weights(col_log_weights(state, cells, cols), "column")
    g_row, g_col, g_block = intermediate_globals(state, cells, priors, rows, cols)
    state.gamma_row = blend(state.gamma_row, g_row, eta)
    state.gamma_col = blend(state.gamma_col, g_col, eta)
    state.gamma_block = blend(state.gamma_block, g_block, eta)
    return state


def svi_step(state: VariationalState, data, priors: Priors, batch: tuple, t: int,
             config: SviConfig, weights: Optional[WeightMatrix] = None,
             eta: Optional[float] = None) -> VariationalState:
    """One stochastic step on the sampled ``batch = (rows, cols)``.

    Local parameters outside the batch keep their values. ``data`` may be a
    CategoricalMatrix or prebuilt ObservedCells; ``eta`` overrides the
    schedule value at step ``t``.
    """
    cells = data if isinstance(data, ObservedCells) else ObservedCells.build(data, weights)
    rows = np.sort(np.asarray(batch[0], dtype=np.int64))
    cols = np.sort(np.asarray(batch[1], dtype=np.int64))
    if eta is None:
        eta = step_size(t, config.tau, config.kappa)
    return _step_inplace(state.copy(), cells, priors, rows, cols, eta)


def sample_batch(rng: np.random.Generator, n: int, m: int, config: SviConfig) -> tuple:
    rows = np.sort(rng.choice(n, size=min(config.batch_rows, n), replace=False))
    cols = np.sort(rng.choice(m, size=min(config.batch_cols, m), replace=False))
    return rows, cols


def fit_svi(data: CategoricalMatrix, priors: Priors, K: int, L: int, init: VariationalState,
            config: SviConfig, seed=None, weights: Optional[WeightMatrix] = None,
            cells: Optional[ObservedCells] = None) -> tuple:
    """Minibatch inference; the full-data ELBO is evaluated every ``eval_every`` steps.

    Stops when the mean ELBO change over the last ``window`` evaluations
    falls below ``tol`` (relative to |ELBO| by default) or after
    ``max_steps``. The report's trace holds one entry per evaluation.
    """
    if (init.K, init.L, init.N, init.M) != (K, L, data.n_rows, data.n_cols):
        raise ValueError("init state is not shape-compatible with the data and (K, L)")
    if config.batch_rows > data.n_rows or config.batch_cols > data.n_cols:
        raise ValueError("batch sizes must not exceed the matrix dimensions")
    if cells is None:
        cells = ObservedCells.build(data, weights)
    rng = np.random.default_rng(seed)
    state = init.copy()
    report = FitReport()
    start = time.perf_counter()
    for t in range(1, config.max_steps + 1):
        rows, cols = sample_batch(rng, data.n_rows, data.n_cols, config)
        _step_inplace(state, cells, priors, rows, cols, step_size(t, config.tau, config.kappa))
        report.steps = t
        if t % config.eval_every == 0 or t == config.max_steps:
            report.elbo_trace.append(_elbo(state, cells, priors))
            report.iterations = len(report.elbo_trace)
            if has_converged(report.elbo_trace, config.tol, config.tol_mode, config.window):
                report.converged = True
                break
    report.wall_time = time.perf_counter() - start
    logger.info("SVI: %d steps, ELBO %.6f, converged=%s", report.steps,
                report.elbo_trace[-1], report.converged)
    return state, report
