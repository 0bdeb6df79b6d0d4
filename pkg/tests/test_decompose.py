import numpy as np
import pytest

from cnsbm.cavi import FitConfig, fit
from cnsbm.core import Priors, VariationalState, map_assignments
from cnsbm.data import CategoricalMatrix
from cnsbm.decompose import (StageConfig, chromosome_filter, fit_stage, main_matrix, residual,
                             two_stage)
from cnsbm.initialize import initialize
from cnsbm.simulate import apply_mcar_mask, sample_block_model, sample_main_residual

from conftest import matrix


def test_main_matrix_single_block():
    data = matrix(np.full((3, 4), 2), n_cat=4)
    state = VariationalState(np.ones((3, 1)), np.ones((4, 1)), np.ones(1), np.ones(1),
                             np.array([[[1.0, 1.0, 9.0, 1.0]]]))
    assert np.all(main_matrix(data, state) == 2)


def test_main_matrix_blockwise_constant():
    pm = sample_block_model(30, 40, 3, 4, 6, 0.8, seed=0)
    state, _ = fit_stage(pm.data, StageConfig(3, 4))
    main = main_matrix(pm.data, state)
    hard = map_assignments(state)
    for k in range(3):
        for l in range(4):
            block = main[np.ix_(hard.g == k, hard.h == l)]
            assert block.size == 0 or np.unique(block).size == 1


def test_residual_examples():
    data = matrix([[3, 0], [1, 2]], n_cat=4)
    res = residual(data, np.array([[2, 2], [1, 2]]))
    assert res.signed[0, 0] == 1
    assert res.offset == 2
    assert res.categorical.n_cat == 4
    assert np.array_equal(res.categorical.codes, res.signed + 2)


def test_residual_perfect_fit():
    data = matrix([[1, 2], [3, 0]], n_cat=4)
    res = residual(data, data.codes)
    assert np.all(res.signed == 0) and res.offset == 0
    assert res.categorical.n_cat == 2 and np.all(res.categorical.codes == 0)


def test_residual_keeps_mask():
    data = matrix([[1, 5], [3, 0]], mask=[[1, 0], [1, 1]], n_cat=6)
    res = residual(data, np.ones((2, 2), int))
    assert np.array_equal(res.categorical.mask, data.mask)
    assert res.offset == 1 and res.categorical.n_cat == 4  # residuals {0, 2, -1}
    with pytest.raises(ValueError):
        residual(data, np.ones((3, 2), int))


@pytest.fixture(scope="module")
def planted():
    return sample_main_residual(120, 240, 3, 3, 4, 10, 0.02, 60, seed=1,
                                chromosomes=["chr1", "chr2", "chrX"])


@pytest.fixture(scope="module")
def decomposition(planted):
    return two_stage(planted.data, StageConfig(3, 4, restarts=2), StageConfig(3, 3, restarts=2),
                     exclude=chromosome_filter("chrX"))


def test_reconstruction_identity(planted, decomposition):
    d = planted.data
    assert np.array_equal((decomposition.main + decomposition.residual_signed)[d.mask],
                          d.codes[d.mask])
    assert np.array_equal(decomposition.residual_cat.codes,
                          decomposition.residual_signed[:, [j for j in range(240)
                                                            if j not in decomposition.excluded_cols]]
                          + decomposition.residual_offset)


def test_excluded_columns(planted, decomposition):
    n_x = sum(b.chromosome == "chrX" for b in planted.data.col_meta)
    assert len(decomposition.excluded_cols) == n_x == 80
    assert decomposition.residual_cat.n_cols == 240 - n_x
    assert decomposition.stage2.M == 240 - n_x
    assert all(b.chromosome != "chrX" for b in decomposition.residual_cat.col_meta)


def test_stage1_matches_direct_fit(planted, decomposition):
    cfg = StageConfig(3, 4, restarts=2)
    direct, _ = fit_stage(planted.data, cfg)
    assert np.array_equal(direct.gamma_block, decomposition.stage1.gamma_block)
    init = initialize(planted.data, 3, 4, "spectral", 0)
    single, _ = fit(planted.data, None, Priors(), 3, 4, init, FitConfig())
    one, _ = fit_stage(planted.data, StageConfig(3, 4))
    assert np.array_equal(single.phi_row, one.phi_row)


def test_assignment_table(planted, decomposition):
    table = decomposition.assignment_table(planted.data)
    assert len(table) == 120
    assert table[0][0] == planted.data.row_ids[0]
    assert all(isinstance(a, int) and isinstance(b, int) for _, a, b in table)


def test_min_cluster_rows_filter():
    pm = sample_block_model(40, 50, 2, 3, 5, 0.9, seed=2)
    # three rows of their own make a tiny stage-1 cluster
    codes = np.array(pm.data.codes)
    codes[:3] = 4
    data = CategoricalMatrix(codes, pm.data.mask, 5)
    dec = two_stage(data, StageConfig(3, 3), StageConfig(2, 2), min_cluster_rows=5)
    assert dec.kept_rows.size == 37 and not set(dec.kept_rows) & {0, 1, 2}
    table = dec.assignment_table(data)
    assert table[0][2] is None and table[5][2] is not None


def test_exclude_needs_metadata():
    data = matrix(np.random.default_rng(0).integers(0, 3, size=(10, 10)), n_cat=3)
    with pytest.raises(ValueError):
        two_stage(data, StageConfig(2, 2), StageConfig(2, 2), exclude=chromosome_filter("chrX"))


def test_masked_cells_stay_masked():
    pd = sample_main_residual(60, 120, 2, 2, 3, 8, 0.0, 40, seed=3)
    data = apply_mcar_mask(pd.data, 0.1, seed=0)
    dec = two_stage(data, StageConfig(2, 3), StageConfig(2, 2))
    assert np.array_equal(dec.residual_cat.mask, data.mask)
