import math

import numpy as np
import pytest

from _corpus import GENERIC_LQ, IDIO, equal_lambda_populations, generic, heterogeneous_blowup, identical_populations
from mfgclear.clearing import rate_sweep
from mfgclear.lq_affine import RiccatiBlowUp
from mfgclear.mfg_solver import solve_lq
from mfgclear.model import AssumptionError, LQCoefficients, ModelError
from mfgclear.multipop import (
    GENERAL_T,
    SHORT_T,
    MultiPopSpec,
    PopulationSpec,
    aggregate_price,
    build_multipop_scenarios,
    multipop_clearing_sweep,
    multipop_monotonicity_probe,
    multipop_terminal,
    population_counts,
    solve_multipop_lq,
    stacked_riccati_table,
)
from mfgclear.stochastics import build_scenarios


def _two(lams=(1.0, 3.0), weights=(0.5, 0.5), delta=0.0, **kw):
    pops = tuple(PopulationSpec(w, lam, LQCoefficients.build(1, 1, 1, Q=1.0, P=1.0)) for w, lam in zip(weights, lams))
    return MultiPopSpec(1, 1, 1, 1.0, 10, delta, pops, **kw)


def _solve(spec, M, K, seed):
    return solve_multipop_lq(spec, scenarios=build_multipop_scenarios(spec, spec.grid, M, K, seed))


def test_aggregate_price_example():
    spec = _two()
    # Lhat = (1/2, 1/6), Xi = 3/2, price weights (3/4, 1/4)
    assert np.allclose(spec.price_weights, [[0.75, 0.25]], rtol=1e-15)
    assert aggregate_price(np.array([[1.0], [2.0]]), spec) == pytest.approx([-1.25])


def test_price_weights_sum_to_identity():
    spec = equal_lambda_populations()
    n = spec.n
    total = sum(spec.price_weights[:, p * n : (p + 1) * n] for p in range(spec.m))
    assert np.allclose(total, np.eye(n), atol=1e-15)


def test_terminal_examples():
    spec = _two(delta=0.0)
    x = np.array([[[2.0]], [[-1.0]]])
    zeros = np.zeros((1, 1))
    out = multipop_terminal(x, zeros, np.zeros((2, 1, 1)), np.zeros((2, 1, 1)), spec)
    assert out[:, 0, 0] == pytest.approx([2.0, -1.0])
    spec = _two(delta=0.5)
    out = multipop_terminal(x, zeros, np.zeros((2, 1, 1)), x, spec)
    # shared term: 0.75 * 2 + 0.25 * (-1) = 1.25
    assert out[:, 0, 0] == pytest.approx([3.25, 0.25])


def test_identical_populations_reduce_to_one():
    multi = identical_populations(3, S=50)
    single = generic(S=50)
    ms = _solve(multi, 3, 4, 11)
    ss = solve_lq(single, scenarios=build_scenarios(single, single.grid, 3, 4, 11))
    assert np.max(np.abs(ms.phi - ss.phi)) <= 1e-9
    for sol in ms.populations:
        assert np.max(np.abs(sol.ybar - ss.ybar)) <= 1e-9


def test_equal_lambda_price_is_weighted_average():
    spec = equal_lambda_populations()
    sol = _solve(spec, 4, 4, 2)
    avg = -sum(w * s.ybar for w, s in zip(spec.weights, sol.populations))
    assert np.max(np.abs(sol.phi - avg)) <= 1e-12


def test_multipop_in_sample_clearing():
    spec = equal_lambda_populations()
    sol = _solve(spec, 3, 8, 4)
    assert sol.in_sample_clearing_residual(spec) <= 1e-12
    for s in sol.populations:
        assert np.array_equal(s.c0, sol.populations[0].c0)


def test_mean_controls_cancel_across_populations():
    otc = {**GENERIC_LQ, "K_l": 0.0, "F_phi": 0.0}
    a = PopulationSpec(0.4, 1.0, LQCoefficients.build(1, 1, 1, **otc), IDIO, [0.2], [[0.25]])
    b = PopulationSpec(0.6, 2.0, LQCoefficients.build(1, 1, 1, **GENERIC_LQ), IDIO, [0.0], [[0.1]])
    spec = MultiPopSpec(1, 1, 1, 1.0, 40, 0.0, (a, b), generic().common_factor)
    sol = _solve(spec, 3, 2, 5)
    flows = [w * (s.ybar + sol.phi) / s.Lambda[0, 0] for w, s in zip(spec.weights, sol.populations)]
    # each population trades with the other, so the flows are nonzero but cancel
    assert np.max(np.abs(flows[0])) > 1e-2
    assert np.max(np.abs(flows[0] + flows[1])) <= 1e-12


def test_heterogeneous_blowup_depends_on_horizon():
    with pytest.raises(RiccatiBlowUp) as info:
        solve_multipop_lq(heterogeneous_blowup(2.0))
    assert info.value.node == 31
    assert info.value.time == pytest.approx(0.62)
    sol = solve_multipop_lq(heterogeneous_blowup(1.0))
    assert np.all(np.isfinite(sol.mean.Abar))


def test_stacked_riccati_table():
    spec = heterogeneous_blowup(1.0)
    sol = solve_multipop_lq(spec)
    cols, rows = stacked_riccati_table(sol.mean, spec.grid, 1)
    assert cols == ["t", "Abar_11", "Abar_12", "Abar_21", "Abar_22", "beta_11", "beta_21", "beta0_1", "beta0_2"]
    assert rows.shape == (spec.S + 1, len(cols))


def test_single_population_sweep_matches():
    base = generic(S=16)
    pop = PopulationSpec(1.0, 1.0, base.lq, base.idio_factor, base.xi_mean, base.xi_cov)
    multi = MultiPopSpec(1, 1, 1, 1.0, 16, base.delta, (pop,), base.common_factor, GENERAL_T)
    ms = _solve(multi, 4, 4, 3)
    ss = solve_lq(base, scenarios=build_scenarios(base, base.grid, 4, 4, 3))
    a = multipop_clearing_sweep(multi, ms, [8, 32, 128], reps=2, seed=9)
    b = rate_sweep(base, ss, [8, 32, 128], reps=2, seed=9)
    assert np.allclose(a.metric, b.metric, rtol=1e-12, atol=0)


def test_identical_populations_sweep_statistically_matches():
    multi = identical_populations(2, S=16)
    single = generic(S=16)
    ms = _solve(multi, 8, 8, 3)
    ss = solve_lq(single, scenarios=build_scenarios(single, single.grid, 8, 8, 3))
    a = multipop_clearing_sweep(multi, ms, [16, 64, 256], reps=8, seed=21)
    b = rate_sweep(single, ss, [16, 64, 256], reps=8, seed=22)
    assert a.table().shape[1] == 8
    for ra, rb in zip(a.rows, b.rows):
        assert abs(ra.metric - rb.metric) / math.hypot(ra.stderr, rb.stderr) <= 4.0
        assert sum(ra.breakdown) > 0


def test_population_counts():
    spec = _two(weights=(0.25, 0.75))
    assert population_counts(spec, 16) == [4, 12]
    with pytest.raises(ValueError):
        population_counts(spec, 1)


@pytest.mark.parametrize("weights", [(0.5, 0.6), (1.2, -0.2)])
def test_weight_errors(weights):
    with pytest.raises(ModelError, match="weights"):
        _two(weights=weights)


def test_general_t_requirements():
    with pytest.raises(ModelError, match="same Lambda"):
        _two(mode=GENERAL_T)
    with pytest.raises(ModelError, match="equal weights"):
        _two(lams=(1.0, 1.0), weights=(0.3, 0.7), mode=GENERAL_T)
    with pytest.raises(ModelError):
        _two(mode="long")


def test_general_t_refuses_short_horizon_population():
    bad = PopulationSpec(0.5, 1.0, LQCoefficients.build(1, 1, 1, K_l=-1.0, Q=1.0))
    good = PopulationSpec(0.5, 1.0, LQCoefficients.build(1, 1, 1, **GENERIC_LQ))
    spec = MultiPopSpec(1, 1, 1, 0.5, 10, 0.0, (good, bad), mode=GENERAL_T)
    with pytest.raises(AssumptionError, match=r"\[2\]"):
        solve_multipop_lq(spec)
    assert np.all(np.isfinite(solve_multipop_lq(spec, allow_short_t=True).phi))
    assert MultiPopSpec(1, 1, 1, 0.5, 10, 0.0, (good, bad)).mode == SHORT_T


def test_multipop_probe():
    rep = multipop_monotonicity_probe(identical_populations(2), sample_count=100, seed=2)
    assert rep.total_violations == 0
    assert multipop_monotonicity_probe(equal_lambda_populations(), sample_count=100).total_violations == 0
