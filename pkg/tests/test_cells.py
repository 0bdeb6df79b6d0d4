import numpy as np
import pytest
from hypothesis import given, strategies as st

from cnsbm.cells import ObservedCells, block_soft_counts, ordered_sum
from cnsbm.data import CategoricalMatrix, WeightMatrix, propensity_frequency


def _instance(seed, n=8, m=11, n_cat=4, K=3, L=2, rate=0.3):
    rng = np.random.default_rng(seed)
    codes = rng.integers(0, n_cat, size=(n, m))
    mask = rng.random((n, m)) > rate
    mask[:, 0] = True
    mask[0] = True
    data = CategoricalMatrix(codes, mask, n_cat)
    return data, rng.dirichlet(np.ones(K), size=n), rng.dirichlet(np.ones(L), size=m)


def _dense(data, weights=None):
    w = data.mask.astype(float) if weights is None else weights.weights
    onehot = np.eye(data.n_cat)[data.codes]  # (N, M, C)
    return w[:, :, None] * onehot


@given(st.integers(0, 2**31))
def test_row_and_col_sums_match_dense(seed):
    data, phi_r, phi_c = _instance(seed)
    cells = ObservedCells.build(data)
    X = _dense(data)
    assert np.allclose(cells.row_sums(phi_c), np.einsum("ijc,jl->ilc", X, phi_c))
    assert np.allclose(cells.col_sums(phi_r), np.einsum("ijc,ik->jkc", X, phi_r))
    rows = np.array([5, 1])
    assert np.allclose(cells.row_sums(phi_c, rows), np.einsum("ijc,jl->ilc", X[rows], phi_c))


def test_column_subset_via_keep():
    data, _, phi_c = _instance(4)
    cells = ObservedCells.build(data)
    keep = np.zeros(data.n_cols, bool)
    keep[[0, 3, 7]] = True
    X = _dense(data)[:, keep]
    assert np.allclose(cells.row_sums(phi_c, None, keep), np.einsum("ijc,jl->ilc", X, phi_c[keep]))


@given(st.integers(0, 2**31))
def test_block_soft_counts_weighted(seed):
    data, phi_r, phi_c = _instance(seed)
    w = propensity_frequency(data)
    cells = ObservedCells.build(data, w)
    want = np.einsum("ijc,ik,jl->klc", _dense(data, w), phi_r, phi_c)
    assert np.allclose(block_soft_counts(cells, phi_r, phi_c), want)
    assert np.allclose(block_soft_counts(cells, phi_r, phi_c, deterministic=True), want)
    assert cells.total_weight == pytest.approx(w.weights.sum())


class _RawWeights:
    # skips WeightMatrix validation so the cells-level check is exercised
    def __init__(self, w):
        self.weights = w
        self.mode = "observed-only"


def test_weights_off_mask_rejected():
    data, _, _ = _instance(0)
    with pytest.raises(ValueError, match="unobserved"):
        ObservedCells.build(data, _RawWeights(np.ones(data.shape)))


def test_dense_onehot():
    data, _, _ = _instance(2)
    cells = ObservedCells.build(data)
    assert np.array_equal(cells.dense_weighted_onehot(), _dense(data).transpose(2, 0, 1))


@given(st.integers(0, 2**31))
def test_ordered_sum_permutation_exact(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(50, 3)) * 10.0 ** rng.integers(-5, 5, size=(50, 1))
    perm = rng.permutation(50)
    assert np.array_equal(ordered_sum(x), ordered_sum(x[perm]))
    assert np.allclose(ordered_sum(x), x.sum(axis=0))
