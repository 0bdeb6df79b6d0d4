"""Clustering-informed initial states: k-means and spectral biclustering."""

from __future__ import annotations

import logging
import warnings

import numpy as np
from sklearn.cluster import KMeans

from .core import Priors, VariationalState, init_random, soften, state_from_assignments
from .data import CategoricalMatrix, impute_marginal

logger = logging.getLogger(__name__)

SOFTEN = 0.9
KMEANS_RESTARTS = 10
KMEANS_ITERS = 100


def _require_full(data: CategoricalMatrix):
    if not data.mask.all():
        raise ValueError("initialization needs a fully observed matrix; impute first")


def kmeans_labels(X: np.ndarray, k: int, seed) -> np.ndarray:
    if k == 1:
        return np.zeros(X.shape[0], dtype=np.int64)
    km = KMeans(n_clusters=k, init="k-means++", n_init=KMEANS_RESTARTS,
                max_iter=KMEANS_ITERS, random_state=seed)
    with warnings.catch_warnings():
        # duplicate points leave fewer distinct centres than k
        warnings.simplefilter("ignore")
        return km.fit_predict(X).astype(np.int64)


def _seed_pair(seed):
    ss = np.random.SeedSequence(seed)
    a, b = ss.spawn(2)
    return int(a.generate_state(1)[0]), int(b.generate_state(1)[0])


def state_from_labels(data, row_labels, col_labels, K, L, priors, weights=None) -> VariationalState:
    phi_row = soften(row_labels, K, SOFTEN)
    phi_col = soften(col_labels, L, SOFTEN)
    return state_from_assignments(phi_row, phi_col, priors, data.n_cat, data, weights)


def init_kmeans(data: CategoricalMatrix, K: int, L: int, seed=None,
                priors: Priors = Priors(), weights=None) -> VariationalState:
    """Independent k-means on rows and on columns, read as code vectors."""
    _require_full(data)
    if K > data.n_rows or L > data.n_cols:
        raise ValueError("K must not exceed N and L must not exceed M")
    X = data.codes.astype(np.float64)
    s_row, s_col = _seed_pair(seed)
    g = kmeans_labels(X, K, s_row)
    h = kmeans_labels(X.T, L, s_col)
    return state_from_labels(data, g, h, K, L, priors, weights)


def sinkhorn(A: np.ndarray, max_iter: int = 50, tol: float = 1e-8) -> np.ndarray:
    """Alternate row/column rescaling of a positive matrix.

    Rows are scaled to sum to 1 and columns to N/M (both 1 for square input),
    the only pair of constant margins a rectangular matrix can attain.
    """
    A = np.asarray(A, dtype=np.float64)
    if np.any(A <= 0):
        raise ValueError("Sinkhorn scaling needs a strictly positive matrix")
    n, m = A.shape
    col_target = n / m
    r = np.ones(n)
    c = np.ones(m)
    for _ in range(max_iter):
        r = 1.0 / (A @ c)
        c = col_target / (A.T @ r)
        B = r[:, None] * A * c[None, :]
        if (np.abs(B.sum(axis=1) - 1.0).max() < tol
                and np.abs(B.sum(axis=0) - col_target).max() < tol):
            break
    return r[:, None] * A * c[None, :]


def spectral_embedding(data: CategoricalMatrix, variant: str = "log", n_components: int = 2):
    """Leading singular vectors (scaled by singular values) for rows and columns."""
    codes = data.codes.astype(np.float64)
    if variant == "log":
        A = np.log1p(codes)
    elif variant in ("bistochastic", "bist"):
        A = sinkhorn(codes + 1.0)
    else:
        raise ValueError(f"unknown spectral variant {variant!r}")
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    n = min(n_components, s.size)
    return U[:, :n] * s[:n], Vt[:n].T * s[:n]


def init_spectral(data: CategoricalMatrix, K: int, L: int, variant: str = "log",
                  n_components=None, seed=None, priors: Priors = Priors(),
                  weights=None) -> VariationalState:
    """Spectral biclustering initialization.

    Rows and columns are embedded with the leading singular pairs of the
    log-transformed (or Sinkhorn-balanced) code matrix and then clustered with
    k-means. A constant matrix has no spectral structure and falls back to a
    random initialization.
    """
    _require_full(data)
    if K > data.n_rows or L > data.n_cols:
        raise ValueError("K must not exceed N and L must not exceed M")
    if n_components is None:
        n_components = min(K, L)
    if n_components < 1:
        raise ValueError("n_components must be >= 1")
    if np.all(data.codes == data.codes.flat[0]):
        warnings.warn("constant matrix: falling back to random initialization", RuntimeWarning)
        return init_random(data.n_rows, data.n_cols, K, L, data.n_cat, priors, seed, data, weights)
    row_emb, col_emb = spectral_embedding(data, variant, n_components)
    s_row, s_col = _seed_pair(seed)
    g = kmeans_labels(row_emb, K, s_row)
    h = kmeans_labels(col_emb, L, s_col)
    return state_from_labels(data, g, h, K, L, priors, weights)


def initialize(data: CategoricalMatrix, K: int, L: int, method: str = "spectral", seed=None,
               priors: Priors = Priors(), weights=None, variant: str = "log",
               n_components=None, impute_seed=None,
               impute_per_column: bool = False) -> VariationalState:
    """Initial state by name. Missing cells are imputed for the clustering step only.

    ``impute_seed`` defaults to ``seed``.
    """
    if method == "random":
        return init_random(data.n_rows, data.n_cols, K, L, data.n_cat, priors, seed, data, weights)
    full = impute_marginal(data, seed if impute_seed is None else impute_seed, impute_per_column)
    if method == "kmeans":
        state = init_kmeans(full, K, L, seed, priors)
    elif method == "spectral":
        state = init_spectral(full, K, L, variant, n_components, seed, priors)
    else:
        raise ValueError(f"unknown initialization {method!r}")
    if full is data:
        return state
    # globals must reflect only the observed cells
    return state_from_assignments(state.phi_row, state.phi_col, priors, data.n_cat, data, weights)
