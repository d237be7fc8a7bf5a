"""Equilibrium solvers (exact LQ and deterministic nonlinear) and the
monotonicity and stability diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_simpson

from .lq_affine import (
    fluctuation_paths,
    fluctuation_step_maps,
    reconstruct_paths,
    solve_affine,
    solve_fluctuation_system,
)
from .model import (
    FUTURES,
    AssumptionError,
    ModelError,
    ModelSpec,
    hamiltonian_minimizer,
    validate_model,
)
from .solution import EquilibriumSolution
from .stochastics import ROLE_PROBE, ScenarioSet, TimeGrid, build_scenarios, stream

__all__ = [
    "ConvergenceError",
    "DivergenceError",
    "EquilibriumSolution",
    "ProbeReport",
    "SolverConfig",
    "StabilityReport",
    "monotonicity_probe",
    "solve_lq",
    "solve_nonlinear_deterministic",
    "stability_probe",
]


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-10
    max_iter: int = 500
    damping: float = 0.5
    guard_window: int = 10

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.max_iter < 1 or self.guard_window < 1:
            raise ValueError("max_iter and guard_window must be >= 1")


class ConvergenceError(ArithmeticError):
    def __init__(self, message: str, history):
        super().__init__(message)
        self.history = tuple(history)


class DivergenceError(ConvergenceError):
    pass


def _default_scenarios(spec: ModelSpec, grid: TimeGrid, scenarios: ScenarioSet | None) -> ScenarioSet:
    return scenarios if scenarios is not None else build_scenarios(spec, grid, 1, 2, 0)


def solve_lq(
    spec: ModelSpec,
    grid: TimeGrid | None = None,
    scenarios: ScenarioSet | None = None,
    *,
    allow_short_t: bool = False,
) -> EquilibriumSolution:
    """Exact equilibrium of an LQ model with identity price map.

    Refuses models whose validation verdict only covers a short horizon
    unless ``allow_short_t`` is set.  Riccati blow-up propagates.
    """
    report = validate_model(spec)
    if not report.solvable and not allow_short_t:
        raise AssumptionError(
            "model is only covered for a short horizon (" + "; ".join(report.warnings) + "); "
            "pass allow_short_t to solve anyway"
        )
    grid = grid or spec.grid
    sol = solve_affine(spec, grid)
    out = reconstruct_paths(spec, grid, _default_scenarios(spec, grid, scenarios), sol)
    out.diagnostics["verdict"] = report.verdict
    return out


def solve_nonlinear_deterministic(
    spec: ModelSpec,
    grid: TimeGrid | None = None,
    config: SolverConfig = SolverConfig(),
    scenarios: ScenarioSet | None = None,
) -> EquilibriumSolution:
    """Damped fixed point on a deterministic price path (no common noise, n = 1).

    The price is held on the half-step grid.  Given a price path, the mean
    state is integrated forward and the mean adjoint backward with cumulative
    Simpson quadrature; the update is phi <- (1 - theta) phi + theta (-ybar).
    """
    if spec.n != 1:
        raise ModelError("the nonlinear solver supports n = 1 only")
    if spec.has_common_noise:
        raise ModelError("the nonlinear solver requires sigma0 = 0 and a deterministic common factor")
    validate_model(spec)
    grid = grid or spec.grid
    lq, psi = spec.lq, spec.psi
    tau = grid.half_nodes
    H = 0.5 * grid.dt
    c0 = spec.common_factor.mean_path(tau)
    cbar = spec.idio_factor.mean_path(tau)
    w = 1.0 / (1.0 - spec.delta)
    base_x = c0 @ lq.L_c0.T + cbar @ lq.L_c.T + lq.l_const

    def mean_pair(phi):
        xbar = spec.xi_mean + cumulative_simpson(psi(phi) @ lq.K_l.T + base_x, dx=H, axis=0, initial=0.0)
        drift = spec.running_marginal(xbar, phi, c0, cbar)
        integral = cumulative_simpson(drift, dx=H, axis=0, initial=0.0)
        yT = w * spec.terminal_marginal(xbar[-1], c0[-1], cbar[-1])
        return xbar, yT + (integral[-1] - integral)

    theta = config.damping
    phi = -mean_pair(np.zeros_like(c0))[1]
    history = []
    for it in range(1, config.max_iter + 1):
        xbar, ybar = mean_pair(phi)
        target = -ybar
        res = float(np.max(np.abs(target - phi)))
        history.append(res)
        if not math.isfinite(res):
            raise DivergenceError("fixed-point iteration produced non-finite values", history)
        if res <= config.tol:
            phi = target
            break
        g = config.guard_window
        if it > g and res > history[-1 - g]:
            raise DivergenceError(
                f"residual grew over {g} iterations ({history[-1 - g]:.3g} -> {res:.3g}); "
                "try a smaller damping or a shorter horizon",
                history,
            )
        phi = (1.0 - theta) * phi + theta * target
    else:
        raise ConvergenceError(
            f"no convergence within {config.max_iter} iterations (last residual {history[-1]:.3g})", history
        )

    xbar, ybar = mean_pair(phi)
    scen = _default_scenarios(spec, grid, scenarios)
    fl = solve_fluctuation_system(spec, grid)
    Xt, Yt = fluctuation_paths(spec, fl, grid, fluctuation_step_maps(spec, fl, grid), scen.dW, scen.c, scen.xi)
    M = scen.M
    on_grid = lambda a: np.broadcast_to(a[::2], (M,) + a[::2].shape).copy()  # noqa: E731
    phi_n, xbar_n, ybar_n = on_grid(phi), on_grid(xbar), on_grid(ybar)
    X = xbar_n[:, None] + Xt
    Y = ybar_n[:, None] + Yt
    return EquilibriumSolution(
        grid=grid,
        mode="nonlinear",
        phi=phi_n,
        xbar=xbar_n,
        ybar=ybar_n,
        c0=on_grid(c0),
        X=X,
        Y=Y,
        alpha=hamiltonian_minimizer(Y, phi_n[:, None], spec.Lambda),
        Lambda=spec.Lambda,
        spec_hash=spec.fingerprint(),
        master_seed=scen.master_seed,
        diagnostics={
            "iterations": len(history),
            "final_residual": history[-1],
            "damping": theta,
            "observed_ratio": _observed_ratio(history),
        },
        residual_history=tuple(history),
    )


def _observed_ratio(history) -> float:
    h = [r for r in history if r > 0]
    if len(h) < 3:
        return 0.0
    return float(np.max(np.array(h[2:]) / np.array(h[1:-1])))


# ------------------------------------------------------------------ monotonicity probe


@dataclass(frozen=True)
class ProbeReport:
    samples: int
    worst_slack: dict
    violations: dict
    gamma_l: float
    gamma: float
    notes: tuple = ()

    @property
    def total_violations(self) -> int:
        return sum(self.violations.values())


PROBE_TOL = 1e-9


def _probe_terms(spec: ModelSpec, report, x, xp, y, yp, c0, c, groups, gamma_l):
    """Slacks of the three monotonicity inequalities for one batch.

    Expectations are batch averages; E[. | G] is the group average.
    """
    lq = spec.lq
    Li = spec.Lambda_inv

    def cond(v):
        out = np.empty_like(v)
        for g in np.unique(groups):
            sel = groups == g
            out[sel] = v[sel].mean(axis=0)
        return out

    def B(yv):
        ey = cond(yv)
        return -(yv - ey) @ Li.T + spec.otc_flow(-ey, c0, c)

    def F(xv, yv):
        return -spec.running_marginal(xv, -cond(yv), c0, c)

    def G(xv):
        dg = spec.terminal_marginal(xv, c0, c)
        return spec.delta / (1.0 - spec.delta) * cond(dg) + dg

    dx, dy = x - xp, y - yp
    e_dy2 = np.mean(np.sum(cond(dy) ** 2, axis=1))
    e_dx2 = np.mean(np.sum(dx**2, axis=1))
    inner = lambda a, b: float(np.mean(np.sum(a * b, axis=1)))  # noqa: E731
    s1 = -gamma_l * e_dy2 - inner(B(y) - B(yp), dy)
    if gamma_l > 0:
        gap = report.gamma_f - report.L_phi**2 / (4.0 * gamma_l)
        s2 = -gap * e_dx2 + gamma_l * e_dy2 - inner(F(x, y) - F(xp, yp), dx)
    else:
        s2 = math.nan
    g_term = inner(G(x) - G(xp), dx)
    if spec.mode == FUTURES:
        s3 = -abs(g_term)
    else:
        s3 = g_term - report.gamma * e_dx2
    return s1, s2, s3


def _draw_batch(rng, n, size, price_cap):
    groups = rng.integers(0, 2, size)
    scale = 10.0 ** rng.uniform(-1.0, 1.0, (4,))
    offsets = rng.standard_normal((2, 4, n)) * scale[None, :, None]
    pts = [rng.standard_normal((size, n)) + offsets[groups, i] for i in range(4)]
    if price_cap is not None:
        for i in (2, 3):
            m = np.max(np.abs(pts[i]))
            if m > price_cap:
                pts[i] *= price_cap / m
    c0 = rng.standard_normal((size, n))
    c = rng.standard_normal((size, n))
    return pts, c0, c, groups


def monotonicity_probe(spec: ModelSpec, sample_count: int = 1000, seed: int = 0, batch: int = 32) -> ProbeReport:
    """Sample the three monotonicity inequalities on random batches.

    Each sample is a batch of points split into two conditioning groups with
    random group offsets spanning two decades, so the averaged directions the
    inequalities are sensitive to are explored in both signs.
    """
    report = validate_model(spec)
    gamma_l = max(report.gamma_l, 0.0)
    rng = stream(seed, ROLE_PROBE, 0)
    cap = None if spec.psi.is_identity else spec.psi.price_range
    names = ("B", "F", "G")
    worst = {k: math.inf for k in names}
    count = {k: 0 for k in names}
    for _ in range(sample_count):
        (x, xp, y, yp), c0, c, groups = _draw_batch(rng, spec.n, batch, cap)
        slacks = _probe_terms(spec, report, x, xp, y, yp, c0, c, groups, gamma_l)
        for k, s in zip(names, slacks):
            if math.isnan(s):
                continue
            scale = 1.0 + abs(s)
            worst[k] = min(worst[k], s)
            if s < -PROBE_TOL * scale:
                count[k] += 1
    notes = []
    if report.gamma_l <= 0:
        notes.append("gamma_l <= 0: second inequality not applicable")
    if spec.mode == FUTURES:
        notes.append("futures mode: terminal inequality checked as an equality (terminal map is price-only)")
    return ProbeReport(sample_count, worst, count, report.gamma_l, report.gamma, tuple(notes))


# ------------------------------------------------------------------ stability probe


@dataclass(frozen=True)
class StabilityReport:
    scales: tuple
    ratios: dict  # target -> array of r(s)
    distances: dict
    input_sizes: dict

    def spread(self, target: str) -> float:
        r = np.asarray(self.ratios[target])
        return float(np.max(r) / np.min(r))

    @property
    def max_spread(self) -> float:
        return max(self.spread(t) for t in self.ratios)


STABILITY_TARGETS = ("xi_mean", "l_const", "f_const", "g_const", "sigma0")


def _perturbed(spec: ModelSpec, target: str, s: float):
    """Perturbed spec and the squared L2 size of the coefficient perturbation."""
    n, d0 = spec.n, spec.d0
    u = np.ones(n) / math.sqrt(n)
    T = spec.T
    if target == "xi_mean":
        return spec.replace(xi_mean=spec.xi_mean + s * u), s * s
    if target == "l_const":
        return spec.with_lq(l_const=spec.lq.l_const + s * u), T * s * s
    if target == "f_const":
        return spec.with_lq(f_const=spec.lq.f_const + s * u), T * s * s
    if target == "g_const":
        return spec.with_lq(g_const=spec.lq.g_const + s * u), (s / (1.0 - spec.delta)) ** 2
    if target == "sigma0":
        U = np.ones((n, d0)) / math.sqrt(n * d0)
        return spec.with_lq(sigma0=spec.lq.sigma0 + s * U), T * s * s
    raise ValueError(f"unknown stability target {target!r}")


def solution_distance(a: EquilibriumSolution, b: EquilibriumSolution) -> float:
    """E[sup_t |dX|^2 + sup_t |dY|^2] over all copies."""
    dx = np.max(np.sum((a.X - b.X) ** 2, axis=-1), axis=-1)
    dy = np.max(np.sum((a.Y - b.Y) ** 2, axis=-1), axis=-1)
    return float(np.mean(dx + dy))


def stability_probe(
    spec: ModelSpec,
    perturbation_scales=(1e-3, 1e-2, 1e-1),
    seed: int = 0,
    *,
    targets=None,
    M: int = 16,
    K: int = 16,
    allow_short_t: bool = False,
) -> StabilityReport:
    """Response of the solution to coefficient perturbations on shared scenarios."""
    if targets is None:
        targets = tuple(t for t in STABILITY_TARGETS if not (t == "g_const" and spec.mode == FUTURES))
    grid = spec.grid
    base = solve_lq(spec, grid, build_scenarios(spec, grid, M, K, seed), allow_short_t=allow_short_t)
    ratios, dists, sizes = {}, {}, {}
    for target in targets:
        r, dd, ss = [], [], []
        for s in perturbation_scales:
            pspec, size = _perturbed(spec, target, s)
            pert = solve_lq(pspec, grid, build_scenarios(pspec, grid, M, K, seed), allow_short_t=allow_short_t)
            dist = solution_distance(base, pert)
            dd.append(dist)
            ss.append(size)
            r.append(dist / size if size > 0 else 0.0)
        ratios[target] = np.array(r)
        dists[target] = np.array(dd)
        sizes[target] = np.array(ss)
    return StabilityReport(tuple(perturbation_scales), ratios, dists, sizes)
