"""Variational state of the categorical block model and Dirichlet primitives."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import gammaln

from .cells import ObservedCells, block_soft_counts

# Below this the digamma recurrence shifts the argument upwards.
_ASYMPTOTIC_FROM = 10.0
# Bernoulli-number coefficients of the asymptotic series in 1/x^2.
_PSI_SERIES = (1.0 / 12, -1.0 / 120, 1.0 / 252, -1.0 / 240, 1.0 / 132, -691.0 / 32760)


def digamma(x):
    """Digamma function for positive arguments.

    Uses psi(x) = psi(x + 1) - 1/x until the argument exceeds 10, then the
    asymptotic expansion log x - 1/(2x) - sum B_2n / (2n x^2n).
    """
    x = np.array(x, dtype=np.float64, copy=True)
    if np.any(~(x > 0)):
        raise ValueError("digamma is only defined here for positive arguments")
    shift = np.zeros_like(x)
    small = x < _ASYMPTOTIC_FROM
    while np.any(small):
        shift[small] -= 1.0 / x[small]
        x[small] += 1.0
        small = x < _ASYMPTOTIC_FROM
    inv2 = 1.0 / (x * x)
    series = np.zeros_like(x)
    for coef in reversed(_PSI_SERIES):
        series = (series + coef) * inv2
    out = np.log(x) - 0.5 / x - series + shift
    return out if out.ndim else float(out)


def expected_log_dirichlet(gamma) -> np.ndarray:
    """E[log pi] under Dir(gamma), along the last axis."""
    gamma = np.asarray(gamma, dtype=np.float64)
    if np.any(~(gamma > 0)):
        raise ValueError("Dirichlet parameters must be strictly positive")
    return digamma(gamma) - digamma(gamma.sum(axis=-1, keepdims=True))


def dirichlet_kl(q_params, p_params) -> float:
    """KL(Dir(q) || Dir(p)) in closed form."""
    q = np.asarray(q_params, dtype=np.float64)
    p = np.asarray(p_params, dtype=np.float64)
    if q.shape != p.shape:
        raise ValueError("Dirichlet parameter vectors must have equal length")
    if np.any(~(q > 0)) or np.any(~(p > 0)):
        raise ValueError("Dirichlet parameters must be strictly positive")
    kl = (gammaln(q.sum(axis=-1)) - gammaln(p.sum(axis=-1))
          + np.sum(gammaln(p) - gammaln(q), axis=-1)
          + np.sum((q - p) * expected_log_dirichlet(q), axis=-1))
    return kl if np.ndim(kl) else float(kl)


@dataclass(frozen=True)
class Priors:
    alpha_block: float = 1.0
    alpha_row: float = 1.0
    alpha_col: float = 1.0

    def __post_init__(self):
        if min(self.alpha_block, self.alpha_row, self.alpha_col) <= 0:
            raise ValueError("Dirichlet concentrations must be strictly positive")


@dataclass
class VariationalState:
    phi_row: np.ndarray     # (N, K)
    phi_col: np.ndarray     # (M, L)
    gamma_row: np.ndarray   # (K,)
    gamma_col: np.ndarray   # (L,)
    gamma_block: np.ndarray  # (K, L, n_cat)

    @property
    def K(self) -> int:
        return self.gamma_row.shape[0]

    @property
    def L(self) -> int:
        return self.gamma_col.shape[0]

    @property
    def n_cat(self) -> int:
        return self.gamma_block.shape[2]

    @property
    def N(self) -> int:
        return self.phi_row.shape[0]

    @property
    def M(self) -> int:
        return self.phi_col.shape[0]

    def copy(self) -> "VariationalState":
        return VariationalState(*(np.array(a) for a in (
            self.phi_row, self.phi_col, self.gamma_row, self.gamma_col, self.gamma_block)))

    def validate(self, atol: float = 1e-12):
        for name, phi in (("phi_row", self.phi_row), ("phi_col", self.phi_col)):
            if np.any(phi < 0) or not np.allclose(phi.sum(axis=1), 1.0, rtol=0, atol=atol):
                raise ValueError(f"{name} is not row-stochastic")
        for name in ("gamma_row", "gamma_col", "gamma_block"):
            if np.any(~(getattr(self, name) > 0)):
                raise ValueError(f"{name} must be strictly positive")
        if self.gamma_block.shape[:2] != (self.K, self.L):
            raise ValueError("gamma_block shape does not match (K, L)")
        if self.phi_row.shape[1] != self.K or self.phi_col.shape[1] != self.L:
            raise ValueError("phi widths do not match gamma lengths")

    def permuted(self, row_perm=None, col_perm=None) -> "VariationalState":
        """Relabel clusters: new cluster a is old cluster perm[a]."""
        rp = np.arange(self.K) if row_perm is None else np.asarray(row_perm)
        cp = np.arange(self.L) if col_perm is None else np.asarray(col_perm)
        return VariationalState(self.phi_row[:, rp], self.phi_col[:, cp],
                                self.gamma_row[rp], self.gamma_col[cp],
                                self.gamma_block[rp][:, cp])

    def to_dict(self, include_phi: bool = True) -> dict:
        d = {
            "K": self.K, "L": self.L, "n_cat": self.n_cat, "N": self.N, "M": self.M,
            "gamma_row": self.gamma_row.tolist(),
            "gamma_col": self.gamma_col.tolist(),
            "gamma_block": self.gamma_block.tolist(),
            "map_row": map_assignments(self).g.tolist(),
            "map_col": map_assignments(self).h.tolist(),
        }
        if include_phi:
            d["phi_row"] = self.phi_row.tolist()
            d["phi_col"] = self.phi_col.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VariationalState":
        K, L = d["K"], d["L"]
        if "phi_row" in d:
            phi_row = np.asarray(d["phi_row"], dtype=np.float64).reshape(d["N"], K)
            phi_col = np.asarray(d["phi_col"], dtype=np.float64).reshape(d["M"], L)
        else:
            phi_row = np.eye(K)[np.asarray(d["map_row"], dtype=np.int64)]
            phi_col = np.eye(L)[np.asarray(d["map_col"], dtype=np.int64)]
        return cls(phi_row, phi_col,
                   np.asarray(d["gamma_row"], dtype=np.float64),
                   np.asarray(d["gamma_col"], dtype=np.float64),
                   np.asarray(d["gamma_block"], dtype=np.float64))


@dataclass(frozen=True)
class HardAssignments:
    g: np.ndarray
    h: np.ndarray

    @property
    def K_eff(self) -> int:
        return int(np.unique(self.g).size)

    @property
    def L_eff(self) -> int:
        return int(np.unique(self.h).size)


def map_assignments(state: VariationalState) -> HardAssignments:
    """Argmax cluster per row and column (ties go to the lowest index)."""
    return HardAssignments(np.argmax(state.phi_row, axis=1), np.argmax(state.phi_col, axis=1))


def block_mode(state: VariationalState, k: int, l: int) -> int:
    """Code with the largest posterior Dirichlet mean in block (k, l)."""
    if not (0 <= k < state.K and 0 <= l < state.L):
        raise IndexError(f"block ({k}, {l}) out of range")
    return int(np.argmax(state.gamma_block[k, l]))


def soften(labels: np.ndarray, n_clusters: int, weight: float = 0.9) -> np.ndarray:
    """One-hot labels mixed with the uniform distribution (weight on the one-hot part)."""
    labels = np.asarray(labels, dtype=np.int64)
    if n_clusters == 1:
        return np.ones((labels.size, 1))
    return weight * np.eye(n_clusters)[labels] + (1.0 - weight) / n_clusters


def global_parameters(phi_row, phi_col, priors: Priors, n_cat: int,
                      block_counts: Optional[np.ndarray] = None) -> tuple:
    """gamma vectors from soft assignments and (optionally) block soft counts."""
    gamma_row = priors.alpha_row + phi_row.sum(axis=0)
    gamma_col = priors.alpha_col + phi_col.sum(axis=0)
    if block_counts is None:
        block_counts = np.zeros((phi_row.shape[1], phi_col.shape[1], n_cat))
    return gamma_row, gamma_col, priors.alpha_block + block_counts


def init_random(N: int, M: int, K: int, L: int, n_cat: int, priors: Priors = Priors(),
                seed=None, data=None, weights=None) -> VariationalState:
    """Random soft assignments from a flat Dirichlet; globals from one update.

    Without ``data`` the block parameters are left at the prior.
    """
    if min(N, M, K, L) < 1 or n_cat < 2:
        raise ValueError("dimensions must be positive and n_cat >= 2")
    rng = np.random.default_rng(seed)
    phi_row = rng.dirichlet(np.ones(K), size=N) if K > 1 else np.ones((N, 1))
    phi_col = rng.dirichlet(np.ones(L), size=M) if L > 1 else np.ones((M, 1))
    phi_row /= phi_row.sum(axis=1, keepdims=True)
    phi_col /= phi_col.sum(axis=1, keepdims=True)
    return state_from_assignments(phi_row, phi_col, priors, n_cat, data, weights)


def state_from_assignments(phi_row, phi_col, priors: Priors, n_cat: int,
                           data=None, weights=None) -> VariationalState:
    counts = None
    if data is not None:
        counts = block_soft_counts(ObservedCells.build(data, weights), phi_row, phi_col)
    return VariationalState(phi_row, phi_col,
                            *global_parameters(phi_row, phi_col, priors, n_cat, counts))
