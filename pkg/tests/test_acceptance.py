"""Acceptance criteria, each checked at its stated tolerance.

Every test records one PASS/FAIL line, printed in the pytest terminal summary.
"""

import time
import tracemalloc

import numpy as np
import pytest
from scipy.special import digamma as sp_digamma, gammaln

from cnsbm.cavi import FitConfig, _elbo, fit, sweep
from cnsbm.cells import ObservedCells
from cnsbm.core import Priors, dirichlet_kl, expected_log_dirichlet, init_random, map_assignments
from cnsbm.data import CategoricalMatrix, propensity_frequency
from cnsbm.decompose import StageConfig, two_stage
from cnsbm.initialize import init_spectral, initialize, state_from_labels
from cnsbm.metrics import adjusted_rand_index
from cnsbm.refine import icl, icl_penalty, refine_search
from cnsbm.simulate import apply_mcar_mask, sample_block_model, sample_main_residual
from cnsbm.svi import SviConfig, _step_inplace, fit_svi, sample_batch, svi_step

from conftest import ACCEPTANCE


def record(n, name, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {name}  ({detail})"
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line


def best_of(data, K, L, seeds, weights=None, init="spectral"):
    best = None
    for seed in seeds:
        start = initialize(data, K, L, init, seed, Priors(), weights)
        state, report = fit(data, weights, Priors(), K, L, start)
        if best is None or report.elbo_trace[-1] > best[1].elbo_trace[-1]:
            best = (state, report)
    return best


@pytest.fixture(scope="module")
def crit3_instance():
    return sample_block_model(200, 400, 4, 6, 12, 0.95, seed=0)


def test_criterion_01_elbo_monotone():
    t0 = time.perf_counter()
    worst = np.inf
    for seed in range(20):
        pm = sample_block_model(100, 200, 4, 6, 6, 0.7, seed=seed)
        init = init_random(100, 200, 4, 6, 6, Priors(), seed, pm.data)
        cells = ObservedCells.build(pm.data)
        _, report = fit(pm.data, None, Priors(), 4, 6, init)
        trace = [_elbo(init, cells, Priors())] + report.elbo_trace
        rel = np.diff(trace) / np.abs(trace[1:])
        worst = min(worst, rel.min())
    elapsed = time.perf_counter() - t0
    record(1, "ELBO monotone over 20 instances", worst >= -1e-8 and elapsed < 60,
           f"min relative change {worst:.2e}, {elapsed:.1f}s")


def _dm_marginal(data, alpha):
    counts = np.bincount(data.codes[data.mask], minlength=data.n_cat).astype(float)
    a = np.full(data.n_cat, alpha)
    return (gammaln(a + counts).sum() - gammaln((a + counts).sum())
            - gammaln(a).sum() + gammaln(a.sum()))


def test_criterion_02_single_block_marginal():
    rng = np.random.default_rng(0)
    worst = 0.0
    for trial in range(10):
        n, m, c = rng.integers(1, 30), rng.integers(1, 30), rng.integers(2, 12)
        mask = rng.random((n, m)) > 0.2 * (trial % 2)
        mask.flat[0] = True
        data = CategoricalMatrix(rng.integers(0, c, size=(n, m)), mask, c)
        pri = Priors(alpha_block=float(rng.uniform(0.2, 3.0)))
        _, report = fit(data, None, pri, 1, 1, init_random(n, m, 1, 1, c, pri, trial))
        worst = max(worst, abs(report.elbo_trace[-1] - _dm_marginal(data, pri.alpha_block)))
    hand = CategoricalMatrix(np.array([[0]]), np.array([[True]]), 2)
    _, report = fit(hand, None, Priors(), 1, 1, init_random(1, 1, 1, 1, 2, Priors(), 0))
    hand_err = abs(report.elbo_trace[-1] + np.log(2))
    record(2, "K=L=1 ELBO equals Dirichlet-multinomial marginal",
           worst < 1e-6 and hand_err < 1e-6, f"max error {worst:.1e}, hand instance {hand_err:.1e}")


def test_criterion_03_planted_recovery(crit3_instance):
    pm = crit3_instance
    t0 = time.perf_counter()
    state, _ = best_of(pm.data, 4, 6, range(5))
    elapsed = time.perf_counter() - t0
    hard = map_assignments(state)
    ari_r = adjusted_rand_index(hard.g, pm.row_labels)
    ari_c = adjusted_rand_index(hard.h, pm.col_labels)
    record(3, "best-of-5 spectral CAVI planted recovery",
           ari_r >= 0.95 and ari_c >= 0.95 and elapsed < 120,
           f"row ARI {ari_r:.3f}, col ARI {ari_c:.3f}, {elapsed:.1f}s")


def test_criterion_04_primitives():
    h = 1e-5

    def fd(x):
        return (-gammaln(x + 2 * h) + 8 * gammaln(x + h) - 8 * gammaln(x - h)
                + gammaln(x - 2 * h)) / (12 * h)

    grid = np.logspace(-1, np.log10(50), 40)
    worst = 0.0
    for a in grid:
        got = expected_log_dirichlet([a, 1.7, 0.4])
        want = np.array([fd(a), fd(1.7), fd(0.4)]) - fd(a + 2.1)
        worst = max(worst, np.abs(got - want).max())
    rng = np.random.default_rng(0)
    kls = [dirichlet_kl(rng.uniform(0.1, 10, 4), rng.uniform(0.1, 10, 4)) for _ in range(1000)]
    same = max(abs(dirichlet_kl(q, q)) for q in rng.uniform(0.1, 10, (50, 4)))
    closed = abs(dirichlet_kl([2, 1], [1, 1]) - (np.log(2) - 0.5))
    ok = worst < 1e-8 and min(kls) >= 0 and same == 0 and closed < 1e-10
    record(4, "digamma / Dirichlet KL primitives", ok,
           f"fd error {worst:.1e}, min KL {min(kls):.1e}, KL(q,q) {same:.0e}, closed form {closed:.0e}")


def test_criterion_05_icl(crit3_instance):
    direct = 0.5 * (1 * np.log(100) + 2 * np.log(200) + 11 * 2 * 3 * np.log(20000))
    pen = icl_penalty(2, 3, 100, 200, 12, 20000)
    pm = crit3_instance
    state = state_from_labels(pm.data, pm.row_labels, pm.col_labels, 4, 6, Priors())
    a = icl(pm.data, state).icl
    b = icl(pm.data, state.permuted([3, 1, 0, 2], [5, 4, 3, 2, 1, 0])).icl
    record(5, "ICL penalty and label-permutation invariance",
           abs(pen - direct) < 1e-6 and abs(pen - 334.41) < 0.01 and a == b,
           f"penalty {pen:.6f}, permuted ICL difference {abs(a - b):.1e}")


def test_criterion_06_missing_data(crit3_instance):
    pm = crit3_instance
    data = apply_mcar_mask(pm.data, 0.2, seed=0)
    w = propensity_frequency(data)
    state, _ = best_of(data, 4, 6, range(5), weights=w)
    ari = adjusted_rand_index(map_assignments(state).g, pm.row_labels)

    small = sample_block_model(30, 40, 3, 4, 6, 0.7, seed=1)
    ones = propensity_frequency(small.data)
    init = init_random(30, 40, 3, 4, 6, Priors(), 0, small.data)
    # stop both runs before the ELBO goes stationary so the two stopping rules agree
    kw = dict(max_iters=4, tol=1e-300, deterministic_reduction=True)
    a, ra = fit(small.data, None, Priors(), 3, 4, init, FitConfig(weighted=False, **kw))
    b, rb = fit(small.data, ones, Priors(), 3, 4, init, FitConfig(weighted=True, **kw))
    identical = (np.array_equal(a.phi_row, b.phi_row) and np.array_equal(a.phi_col, b.phi_col)
                 and np.array_equal(a.gamma_block, b.gamma_block) and len(ra.elbo_trace) == 4 and ra.elbo_trace == rb.elbo_trace)
    record(6, "IPW fit under 20% MCAR; full-mask weighted == unweighted",
           ari >= 0.9 and identical, f"row ARI {ari:.3f}, bit-identical {identical}")


def test_criterion_07_svi_parity():
    pm = sample_block_model(500, 1000, 4, 6, 12, 0.8, seed=0)
    init = init_spectral(pm.data, 4, 6, seed=0)
    cells = ObservedCells.build(pm.data)
    _, cavi_report = fit(pm.data, None, Priors(), 4, 6, init, cells=cells)
    _, svi_report = fit_svi(pm.data, Priors(), 4, 6, init, SviConfig(128, 256), seed=0, cells=cells)
    gap = abs(svi_report.elbo_trace[-1] - cavi_report.elbo_trace[-1]) / abs(cavi_report.elbo_trace[-1])

    first = sweep(init, cells, Priors())
    step = svi_step(init, cells, Priors(), (np.arange(500), np.arange(1000)), 1,
                    SviConfig(500, 1000, tau=0.0))
    exact = all(np.array_equal(getattr(step, f), getattr(first, f))
                for f in ("phi_row", "phi_col", "gamma_row", "gamma_col", "gamma_block"))
    record(7, "SVI final ELBO within 2% of CAVI; full-batch unit step equals CAVI",
           gap <= 0.02 and exact, f"relative gap {gap:.2e} after {svi_report.steps} steps, exact {exact}")


def test_criterion_08_decomposition():
    pd = sample_main_residual(300, 600, 4, 3, 6, 12, 0.03, 100, seed=0)
    dec = two_stage(pd.data, StageConfig(4, 6, restarts=3), StageConfig(3, 4, restarts=3))
    m = pd.data.mask
    identity = np.array_equal((dec.main + dec.residual_signed)[m], pd.data.codes[m])
    ari = adjusted_rand_index(map_assignments(dec.stage2).g, pd.residual_labels)
    record(8, "main + residual reconstruction; stage-2 residual recovery",
           identity and ari >= 0.9, f"identity {identity}, stage-2 row ARI {ari:.3f}")


def test_criterion_09_refinement(crit3_instance):
    pm = crit3_instance
    # each planted row cluster is split into two interleaved halves
    g8 = pm.row_labels.copy()
    for k in range(4):
        members = np.flatnonzero(pm.row_labels == k)
        g8[members[1::2]] = k + 4
    state = state_from_labels(pm.data, g8, pm.col_labels, 8, 6, Priors())
    start = icl(pm.data, state).K_eff
    res = refine_search(pm.data, state, Priors(), budget=10, criterion="icl")
    monotone = bool(np.all(np.diff(res.trace) >= 0))
    ari = adjusted_rand_index(map_assignments(res.state).g, pm.row_labels)
    record(9, "ICL refinement of an over-split K=8 model",
           res.score.K_eff == 4 and monotone,
           f"K_eff {start} -> {res.score.K_eff}, {len(res.moves)} moves, trace monotone "
           f"{monotone}, row ARI {ari:.3f}")


def _peak_bytes(fn):
    tracemalloc.start()
    tracemalloc.reset_peak()
    fn()
    peak = tracemalloc.get_traced_memory()[1]
    tracemalloc.stop()
    return peak


def test_criterion_10_scaling():
    pm = sample_block_model(1000, 6000, 10, 30, 12, 0.7, seed=0)
    cells = ObservedCells.build(pm.data)
    t0 = time.perf_counter()
    init = init_spectral(pm.data, 10, 30, seed=0)
    state, report = fit(pm.data, None, Priors(), 10, 30, init, FitConfig(tol=1e-4), cells=cells)
    elapsed = time.perf_counter() - t0

    work = init.copy()
    cavi_peak = _peak_bytes(lambda: sweep(work, cells, Priors()))
    cfg = SviConfig(128, 256)
    rows, cols = sample_batch(np.random.default_rng(0), 1000, 6000, cfg)
    svi_state = init.copy()
    svi_peak = _peak_bytes(lambda: _step_inplace(svi_state, cells, Priors(), rows, cols, 0.5))
    ratio = svi_peak / cavi_peak
    record(10, "1000x6000 CAVI runtime; SVI per-step memory vs CAVI sweep",
           report.converged and elapsed <= 600 and ratio <= 0.25,
           f"converged {report.converged} in {report.iterations} sweeps, {elapsed:.1f}s "
           f"including init on 1 core; peak {svi_peak / 2**20:.1f} MiB vs "
           f"{cavi_peak / 2**20:.1f} MiB, ratio {ratio:.3f}")
