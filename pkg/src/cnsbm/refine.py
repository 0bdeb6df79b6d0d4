"""ICL scoring and greedy split/merge refinement of a fitted model."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .cavi import FitConfig, _elbo, _globals, fit
from .cells import ObservedCells
from .core import Priors, VariationalState, map_assignments, soften
from .data import CategoricalMatrix, WeightMatrix, impute_marginal
from .initialize import kmeans_labels
from .metrics import PROB_FLOOR, block_counts

logger = logging.getLogger(__name__)

REFIT_SWEEPS = 20
MIN_ROWS = 5
MIN_COLS = 10


class CapacityError(RuntimeError):
    """No empty cluster slot is available for a split."""


@dataclass(frozen=True)
class IclScore:
    loglik_complete: float
    penalty: float
    icl: float
    K_eff: int
    L_eff: int


def icl_penalty(K: int, L: int, N: int, M: int, n_cat: int, n_obs: int) -> float:
    return float(0.5 * ((K - 1) * np.log(N) + (L - 1) * np.log(M)
                        + (n_cat - 1) * K * L * np.log(n_obs)))


def icl(data: CategoricalMatrix, state: VariationalState, priors: Priors = Priors()) -> IclScore:
    """Complete-data log-likelihood at the MAP partition minus the ICL penalty.

    Cluster proportions and block distributions are plugged in at their
    empirical (maximum-likelihood) values; only non-empty clusters count
    towards the penalty.
    """
    hard = map_assignments(state)
    N, M = data.shape
    n_cat = data.n_cat
    counts = block_counts(data, hard, n_cat, state.K, state.L)
    totals = counts.sum(axis=2, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        probs = np.where(totals > 0, counts / totals, 1.0 / n_cat)
    ii, jj = np.nonzero(data.mask)
    cell_p = probs[hard.g[ii], hard.h[jj], data.codes[ii, jj]]
    row_sizes = np.bincount(hard.g, minlength=state.K)
    col_sizes = np.bincount(hard.h, minlength=state.L)
    loglik = (float(np.log(np.maximum(cell_p, PROB_FLOOR)).sum())
              + float(np.log(row_sizes[hard.g] / N).sum())
              + float(np.log(col_sizes[hard.h] / M).sum()))
    K_eff, L_eff = hard.K_eff, hard.L_eff
    pen = icl_penalty(K_eff, L_eff, N, M, n_cat, max(data.n_observed, 1))
    return IclScore(loglik, pen, loglik - pen, K_eff, L_eff)


def _labels(state, axis):
    hard = map_assignments(state)
    return (hard.g, state.K) if axis == "row" else (hard.h, state.L)


def _with_labels(state, cells, priors, axis, labels, refit_sweeps, data):
    cand = state.copy()
    if axis == "row":
        cand.phi_row = soften(labels, state.K)
    else:
        cand.phi_col = soften(labels, state.L)
    cand.gamma_row, cand.gamma_col, cand.gamma_block = _globals(cand, cells, priors)
    if refit_sweeps > 0:
        cand, _ = fit(data, None, priors, cand.K, cand.L, cand,
                      FitConfig(max_iters=refit_sweeps), cells=cells)
    return cand


def _member_modes(codes, mask, members, other_labels, n_other, n_cat, axis):
    """Modal code of each member within each cluster of the other axis (-1 if unseen)."""
    out = np.full((members.size, n_other), -1, dtype=np.int64)
    for r, idx in enumerate(members):
        line = codes[idx] if axis == "row" else codes[:, idx]
        obs = mask[idx] if axis == "row" else mask[:, idx]
        for o in range(n_other):
            sel = obs & (other_labels == o)
            if sel.any():
                out[r, o] = int(np.argmax(np.bincount(line[sel], minlength=n_cat)))
    return out


def split_cluster(state: VariationalState, data: CategoricalMatrix, axis: str, cluster: int,
                  method: str = "kmeans", priors: Priors = Priors(),
                  weights: Optional[WeightMatrix] = None, refit_sweeps: int = REFIT_SWEEPS,
                  seed=0, cells: Optional[ObservedCells] = None) -> Optional[VariationalState]:
    """Split one cluster into itself and the lowest empty slot.

    ``kmeans`` runs 2-means on the members' code vectors; ``mode`` moves the
    members whose per-block modal codes disagree with the cluster's block
    modes. Returns None when the split leaves one side empty.
    """
    if axis not in ("row", "col"):
        raise ValueError("axis must be 'row' or 'col'")
    labels, n_clusters = _labels(state, axis)
    members = np.flatnonzero(labels == cluster)
    if members.size < 2:
        return None
    free = np.setdiff1d(np.arange(n_clusters), labels)
    if free.size == 0:
        raise CapacityError(f"no empty {axis} cluster available to split {cluster}")
    if cells is None:
        cells = ObservedCells.build(data, weights)
    if method == "kmeans":
        full = impute_marginal(data, seed)
        X = full.codes[members] if axis == "row" else full.codes[:, members].T
        side = kmeans_labels(X.astype(np.float64), 2, seed)
    elif method == "mode":
        hard = map_assignments(state)
        if axis == "row":
            other, n_other = hard.h, state.L
            target = np.argmax(state.gamma_block[cluster], axis=1)
        else:
            other, n_other = hard.g, state.K
            target = np.argmax(state.gamma_block[:, cluster], axis=1)
        modes = _member_modes(data.codes, data.mask, members, other, n_other, data.n_cat, axis)
        seen = modes >= 0
        side = np.any(seen & (modes != target[None, :]), axis=1).astype(np.int64)
    else:
        raise ValueError(f"unknown split method {method!r}")
    if side.min() == side.max():
        return None
    new_labels = labels.copy()
    new_labels[members[side == 1]] = free[0]
    return _with_labels(state, cells, priors, axis, new_labels, refit_sweeps, data)


def merge_clusters(state: VariationalState, data: CategoricalMatrix, axis: str, a: int, b: int,
                   priors: Priors = Priors(), weights: Optional[WeightMatrix] = None,
                   refit_sweeps: int = REFIT_SWEEPS,
                   cells: Optional[ObservedCells] = None) -> VariationalState:
    """Relabel the members of cluster ``b`` as ``a`` and refit briefly."""
    if axis not in ("row", "col"):
        raise ValueError("axis must be 'row' or 'col'")
    if a == b:
        raise ValueError("cannot merge a cluster with itself")
    if cells is None:
        cells = ObservedCells.build(data, weights)
    labels, _ = _labels(state, axis)
    new_labels = np.where(labels == b, a, labels)
    return _with_labels(state, cells, priors, axis, new_labels, refit_sweeps, data)


class RefineResult(NamedTuple):
    state: VariationalState
    score: IclScore
    trace: list
    moves: list


def _modal_vectors(state, axis, hard):
    # block modes of each cluster, restricted to non-empty clusters of the other axis
    if axis == "row":
        cols = np.unique(hard.h)
        return np.argmax(state.gamma_block[:, cols], axis=2)
    rows = np.unique(hard.g)
    return np.argmax(state.gamma_block[rows], axis=2).T


def _cluster_entropy(data, hard, axis, cluster):
    sel_rows = hard.g == cluster if axis == "row" else np.ones(data.n_rows, bool)
    sel_cols = hard.h == cluster if axis == "col" else np.ones(data.n_cols, bool)
    codes = data.codes[np.ix_(sel_rows, sel_cols)]
    mask = data.mask[np.ix_(sel_rows, sel_cols)]
    if not mask.any():
        return 0.0
    p = np.bincount(codes[mask], minlength=data.n_cat) / mask.sum()
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def propose_moves(state: VariationalState, data: CategoricalMatrix, min_rows: int = MIN_ROWS,
                  min_cols: int = MIN_COLS, n_split: int = 2) -> list:
    """Candidate moves as tuples (kind, axis, args...)."""
    hard = map_assignments(state)
    moves = []
    for axis, labels, n_clusters, min_size in (("row", hard.g, state.K, min_rows),
                                                ("col", hard.h, state.L, min_cols)):
        sizes = np.bincount(labels, minlength=n_clusters)
        occupied = np.flatnonzero(sizes > 0)
        modal = _modal_vectors(state, axis, hard)
        pairs = set()
        for x, a in enumerate(occupied):
            for b in occupied[x + 1:]:
                if np.array_equal(modal[a], modal[b]):
                    pairs.add((int(a), int(b)))
        for s in occupied[sizes[occupied] < min_size]:
            others = occupied[occupied != s]
            if others.size == 0:
                continue
            dist = (modal[others] != modal[s]).sum(axis=1)
            t = int(others[np.argmin(dist)])
            pairs.add((min(t, int(s)), max(t, int(s))))
        moves += [("merge", axis, a, b) for a, b in sorted(pairs)]
        if occupied.size < n_clusters:
            ent = [(_cluster_entropy(data, hard, axis, k), int(k))
                   for k in occupied if sizes[k] >= 2]
            for _, k in sorted(ent, key=lambda e: (-e[0], e[1]))[:n_split]:
                moves += [("split", axis, k, "kmeans"), ("split", axis, k, "mode")]
    return moves


def refine_search(data: CategoricalMatrix, state: VariationalState, priors: Priors = Priors(),
                  budget: int = 10, criterion: str = "icl", min_rows: int = MIN_ROWS,
                  min_cols: int = MIN_COLS, weights: Optional[WeightMatrix] = None,
                  refit_sweeps: int = REFIT_SWEEPS, allow_splits: bool = True,
                  seed=0) -> RefineResult:
    """Greedy local search over merges and splits.

    Each round scores every proposed move and applies the best one if it
    improves the criterion; the search stops after ``budget`` accepted moves
    or when no move improves.
    """
    if criterion not in ("icl", "elbo"):
        raise ValueError("criterion must be 'icl' or 'elbo'")
    cells = ObservedCells.build(data, weights)

    def score(s):
        return icl(data, s, priors).icl if criterion == "icl" else _elbo(s, cells, priors)

    current = state
    value = score(current)
    trace, accepted = [value], []
    for _ in range(budget):
        best = None
        for move in propose_moves(current, data, min_rows, min_cols):
            kind, axis = move[0], move[1]
            if kind == "split" and not allow_splits:
                continue
            if kind == "merge":
                cand = merge_clusters(current, data, axis, move[2], move[3], priors,
                                      refit_sweeps=refit_sweeps, cells=cells)
            else:
                cand = split_cluster(current, data, axis, move[2], move[3], priors,
                                     refit_sweeps=refit_sweeps, seed=seed, cells=cells)
                if cand is None:
                    continue
            val = score(cand)
            if val > value and (best is None or val > best[0]):
                best = (val, cand, move)
        if best is None:
            break
        value, current, move = best
        trace.append(value)
        accepted.append(move)
        logger.info("refine: accepted %s, %s = %.4f", move, criterion, value)
    return RefineResult(current, icl(data, current, priors), trace, accepted)
