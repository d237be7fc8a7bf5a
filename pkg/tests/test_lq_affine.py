import math

import numpy as np
import pytest

from _corpus import futures, generic, scalar, two_dim
from _oracles import mean_system_oracle, scalar_riccati_tanh
from mfgclear.lq_affine import (
    GridMismatch,
    RiccatiBlowUp,
    euler_cross_check,
    martingale_residual,
    reconstruct_paths,
    riccati_table,
    solve_affine,
    solve_fluctuation_system,
    solve_mean_system,
)
from mfgclear.model import LQCoefficients, ModelSpec
from mfgclear.stochastics import OUSpec, TimeGrid, build_scenarios


def test_constant_riccati_solution():
    fl = solve_fluctuation_system(scalar(Q=1.0, P=1.0))
    assert np.max(np.abs(fl.A - 1.0)) == 0.0


def test_zero_costs_give_zero_feedback():
    fl = solve_fluctuation_system(scalar(K_l=1.0))
    assert np.all(fl.A == 0.0)


def test_tanh_closed_form():
    spec = scalar(S=200, Q=1.0)
    fl = solve_fluctuation_system(spec)
    assert abs(fl.A[0, 0, 0] - math.tanh(1.0)) <= 1e-8
    assert np.max(np.abs(fl.A[:, 0, 0] - scalar_riccati_tanh(spec.grid.nodes, 1.0))) <= 1e-8


def test_rk4_refinement_endpoint_agreement():
    coarse = solve_affine(generic(S=100))
    fine = solve_affine(generic(S=200))
    for name in ("A", "beta_tilde", "Abar", "beta", "beta0"):
        assert np.max(np.abs(getattr(coarse, name)[0] - getattr(fine, name)[0])) <= 1e-8, name


def test_midpoints_match_refined_grid():
    coarse = solve_affine(generic(S=50))
    fine = solve_affine(generic(S=100))
    assert np.max(np.abs(coarse.Abar_mid - fine.Abar[1::2])) <= 1e-7
    assert np.max(np.abs(coarse.beta0_mid - fine.beta0[1::2])) <= 1e-7
    assert np.max(np.abs(coarse.A_mid - fine.A[1::2])) <= 1e-7


@pytest.mark.parametrize("factory", [generic, two_dim])
def test_mean_system_matches_picard_oracle(factory):
    spec = factory(S=100)
    ms = solve_mean_system(spec)
    idx = np.arange(0, 101, 25)
    Ab, b, b0 = mean_system_oracle(spec, spec.grid.nodes[idx])
    assert np.max(np.abs(Ab - ms.Abar[idx])) <= 1e-6
    assert np.max(np.abs(b - ms.beta[idx])) <= 1e-6
    assert np.max(np.abs(b0 - ms.beta0[idx])) <= 1e-6


def test_terminal_values():
    spec = generic()
    sol = solve_affine(spec)
    w = 1 / (1 - spec.delta)
    lq = spec.lq
    cbT = spec.idio_factor.mean_path([spec.T])[0]
    assert np.array_equal(sol.A[-1], lq.P)
    assert np.array_equal(sol.beta_tilde[-1], lq.G_c)
    assert np.allclose(sol.Abar[-1], w * lq.P, rtol=1e-15)
    assert np.allclose(sol.beta[-1], w * lq.G_c0, rtol=1e-15)
    assert np.allclose(sol.beta0[-1], w * (lq.G_c @ cbT + lq.g_const), rtol=1e-15)


def test_futures_terminal_values():
    lq = LQCoefficients.build(1, 1, 1, K_l=0.7, G_c0=-1.0)
    spec = ModelSpec(1, 1, 1, 1.0, 20, 1.0, 0.0, lq, mode="futures")
    sol = solve_affine(spec)
    assert np.array_equal(sol.beta[-1], -np.eye(1))
    assert np.array_equal(sol.Abar[-1], np.zeros((1, 1)))
    assert np.all(sol.A == 0.0)


def test_futures_fluctuation_feedback_is_not_identically_zero():
    # with Q > 0 only the terminal value A_T = 0 is forced
    sol = solve_affine(futures())
    assert np.array_equal(sol.A[-1], np.zeros((1, 1)))
    assert sol.A[0, 0, 0] > 0.1


def test_decoupled_mean_system():
    spec = generic(K_l=0.0, F_phi=0.0, L_c0=0.0, F_c0=0.0, G_c0=0.0, sigma0=0.0)
    sol = solve_affine(spec)
    assert np.all(sol.beta == 0.0)
    sc = build_scenarios(spec, spec.grid, 4, 2, 1)
    res = reconstruct_paths(spec, spec.grid, sc, sol)
    assert np.ptp(res.phi, axis=0).max() == 0.0


def test_feedback_symmetry():
    sol = solve_affine(two_dim())
    assert sol.diagnostics["asymmetry_A"] <= 1e-12
    assert np.min(np.linalg.eigvalsh(sol.A)) >= -1e-12
    # the mean loading mixes K_l and F_phi and is not symmetric in general
    assert sol.diagnostics["asymmetry_Abar"] > 1e-3


def test_mean_loading_symmetric_for_scalar_couplings():
    base = two_dim()
    spec = base.with_lq(K_l=0.8 * np.eye(2), F_phi=0.3 * np.eye(2))
    assert solve_affine(spec).diagnostics["asymmetry_Abar"] <= 1e-12


def test_blowup_reports_first_failing_node():
    spec = scalar(K_l=-3.0, Q=1.0, P=1.0)
    with pytest.raises(RiccatiBlowUp) as info:
        solve_affine(spec)
    exc = info.value
    pole = 1.0 - math.pi / (6 * math.sqrt(3))
    assert exc.node == 68 and exc.time == pytest.approx(0.68)
    assert abs(exc.time - pole) <= 2 * spec.grid.dt
    assert "node 68" in str(exc)


def test_grid_mismatch_is_rejected():
    spec = generic(S=20)
    sol = solve_affine(spec)
    sc = build_scenarios(spec, TimeGrid(1.0, 10), 1, 2, 0)
    with pytest.raises(GridMismatch):
        reconstruct_paths(spec, TimeGrid(1.0, 10), sc, sol)


def test_no_idiosyncratic_noise_gives_identical_copies():
    spec = generic(S=20, sigma=0.0).replace(
        idio_factor=OUSpec([[2.0]], [0.5], [[0.0]], [1.0]), xi_cov=[[0.0]]
    )
    sc = build_scenarios(spec, spec.grid, 3, 4, 2)
    res = reconstruct_paths(spec, spec.grid, sc, solve_affine(spec))
    assert np.ptp(res.X, axis=1).max() == 0.0
    assert np.max(np.abs(res.Y - res.ybar[:, None])) <= 1e-15
    assert np.max(np.abs(res.alpha)) <= 1e-15


def test_copy_average_control_tracks_copy_average_fluctuation():
    spec = generic(S=20)
    sc = build_scenarios(spec, spec.grid, 2, 400, 3)
    res = reconstruct_paths(spec, spec.grid, sc, solve_affine(spec))
    yt = (res.Y - res.ybar[:, None]).mean(axis=1)
    assert np.allclose(res.alpha.mean(axis=1), -yt @ spec.Lambda_inv.T, atol=1e-14)
    assert np.max(np.abs(yt)) < 0.1


def test_terminal_identity_exact_without_idiosyncratic_noise():
    spec = generic(S=40, sigma=0.0).replace(
        idio_factor=OUSpec([[2.0]], [0.5], [[0.0]], [1.0]), xi_cov=[[0.0]]
    )
    sc = build_scenarios(spec, spec.grid, 4, 3, 8)
    res = reconstruct_paths(spec, spec.grid, sc, solve_affine(spec))
    dg = spec.terminal_marginal(res.X[:, :, -1], res.c0[:, None, -1], sc.c[:, :, -1])
    gap = res.Y[:, :, -1].mean(axis=1) - dg.mean(axis=1) / (1 - spec.delta)
    assert np.max(np.abs(gap)) <= 1e-10


def test_terminal_identity_within_monte_carlo_error():
    spec = generic(S=20)
    K = 1000
    sc = build_scenarios(spec, spec.grid, 6, K, 8)
    res = reconstruct_paths(spec, spec.grid, sc, solve_affine(spec))
    dg = spec.terminal_marginal(res.X[:, :, -1], res.c0[:, None, -1], sc.c[:, :, -1])[..., 0]
    gap = res.Y[:, :, -1, 0].mean(axis=1) - dg.mean(axis=1) / (1 - spec.delta)
    se = spec.delta / (1 - spec.delta) * dg.std(axis=1, ddof=1) / math.sqrt(K)
    assert np.all(np.abs(gap) <= 3 * se)


def test_futures_pin_is_exact():
    spec = futures()
    sc = build_scenarios(spec, spec.grid, 8, 2, 4)
    res = reconstruct_paths(spec, spec.grid, sc, solve_affine(spec))
    assert np.max(np.abs(res.phi[:, -1] - res.c0[:, -1])) == 0.0


def test_martingale_residual_is_unpredictable():
    spec = generic(S=20)
    M = 2000
    sc = build_scenarios(spec, spec.grid, M, 2, 6)
    res = reconstruct_paths(spec, spec.grid, sc, solve_affine(spec))
    incr = martingale_residual(spec, res)[..., 0]
    for f in (np.tanh(res.xbar[:, :-1, 0]), np.tanh(res.c0[:, :-1, 0]), np.ones((M, 20))):
        per_path = np.sum(incr * f, axis=1)
        z = per_path.mean() / (per_path.std(ddof=1) / math.sqrt(M))
        assert abs(z) <= 3.0
    for k in range(1, 20):  # node 0 is deterministic
        r = np.corrcoef(incr[:, k], np.tanh(res.xbar[:, k, 0]))[0, 1]
        assert abs(r) <= 4.5 / math.sqrt(M)


def test_euler_cross_check_first_order():
    spec = generic(S=8)
    sc = build_scenarios(spec, TimeGrid(1.0, 64), 16, 16, 3)
    gaps, ratios = euler_cross_check(spec, sc)
    assert np.all(np.diff(gaps) < 0)
    assert np.all((ratios >= 1.7) & (ratios <= 2.3))


def test_riccati_table_columns():
    cols, rows = riccati_table(solve_affine(two_dim(S=10)))
    assert cols[:3] == ["t", "A_11", "A_12"]
    assert cols[-2:] == ["beta0_1", "beta0_2"]
    assert rows.shape == (11, 1 + 4 * 3 + 2)
