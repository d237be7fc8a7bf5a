"""Riccati and linear ODE machinery for the LQ model, and path reconstruction.

The equilibrium splits into a conditional mean part driven by the common
noise and a price-free fluctuation part driven by the idiosyncratic noise:

    ybar = Abar xbar + beta c0 + beta0,      Ytilde = A Xtilde + btilde ctilde,

with ctilde = c - E[c].  The coefficient functions solve backward ODEs that
are integrated with classical RK4 on the simulation grid.  Forward paths are
propagated with step maps obtained by integrating the variational equations
over each grid step, which is exact up to O(h^4) in the absence of noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import ModelError, ModelSpec, hamiltonian_minimizer
from .solution import EquilibriumSolution
from .stochastics import OUSpec, ScenarioSet, TimeGrid, coarsen

BLOWUP_BOUND = 1e8


class RiccatiBlowUp(ArithmeticError):
    """A backward ODE left the admissible region (|entry| > bound or non-finite)."""

    def __init__(self, node: int, time: float, bound: float, what: str = "Riccati", hint: str = ""):
        self.node = node
        self.time = time
        self.bound = bound
        msg = f"{what} solution blows up at node {node} (t = {time:.10g}): an entry exceeds {bound:g}"
        super().__init__(msg + (f"; {hint}" if hint else ""))


class GridMismatch(ValueError):
    pass


# ------------------------------------------------------------------ ODE core


def rk4_backward(rhs, y_T, nodes, *, bound=BLOWUP_BOUND, what="Riccati"):
    """Integrate y' = rhs(t, y) backward from y(T) = y_T over ``nodes``.

    Returns ``(values, derivs)`` indexed by node, where ``derivs[k]`` is
    ``rhs(t_k, values[k])``.  The first node (scanning backward from T) at
    which an entry exceeds ``bound`` raises :class:`RiccatiBlowUp`.
    """
    nodes = np.asarray(nodes, dtype=float)
    S = nodes.size - 1
    y = np.array(y_T, dtype=float)
    values = np.empty((S + 1,) + y.shape)
    derivs = np.empty_like(values)
    values[S] = y
    derivs[S] = rhs(nodes[S], y)
    for k in range(S - 1, -1, -1):
        t1 = nodes[k + 1]
        h = nodes[k] - t1  # negative
        k1 = derivs[k + 1]
        k2 = rhs(t1 + 0.5 * h, y + 0.5 * h * k1)
        k3 = rhs(t1 + 0.5 * h, y + 0.5 * h * k2)
        k4 = rhs(nodes[k], y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(y)) or np.max(np.abs(y), initial=0.0) > bound:
            raise RiccatiBlowUp(k, float(nodes[k]), bound, what)
        values[k] = y
        derivs[k] = rhs(nodes[k], y)
    return values, derivs


def hermite_midpoints(values, derivs, h):
    """Cubic Hermite interpolant evaluated halfway between consecutive nodes."""
    return 0.5 * (values[:-1] + values[1:]) + (h / 8.0) * (derivs[:-1] - derivs[1:])


# ------------------------------------------------------------------ coefficients


@dataclass(frozen=True, eq=False)
class AffineSolution:
    """Coefficient functions on the grid nodes (``*_mid`` at step midpoints)."""

    grid: TimeGrid
    A: np.ndarray
    beta_tilde: np.ndarray
    Abar: np.ndarray
    beta: np.ndarray
    beta0: np.ndarray
    A_mid: np.ndarray
    beta_tilde_mid: np.ndarray
    Abar_mid: np.ndarray
    beta_mid: np.ndarray
    beta0_mid: np.ndarray
    model_hash: str
    diagnostics: dict = field(default_factory=dict)

    def ybar(self, xbar, c0):
        """Affine mean adjoint, vectorised over leading axes of (S+1, n) paths."""
        return (
            np.einsum("kij,...kj->...ki", self.Abar, xbar)
            + np.einsum("kij,...kj->...ki", self.beta, c0)
            + self.beta0
        )


@dataclass(frozen=True, eq=False)
class Fluctuation:
    A: np.ndarray
    beta_tilde: np.ndarray
    A_mid: np.ndarray
    beta_tilde_mid: np.ndarray


@dataclass(frozen=True, eq=False)
class MeanSystem:
    Abar: np.ndarray
    beta: np.ndarray
    beta0: np.ndarray
    Abar_mid: np.ndarray
    beta_mid: np.ndarray
    beta0_mid: np.ndarray


def _grid_of(spec: ModelSpec, grid: TimeGrid | None) -> TimeGrid:
    grid = grid or spec.grid
    if abs(grid.T - spec.T) > 1e-12 * max(1.0, spec.T):
        raise GridMismatch(f"grid horizon {grid.T} differs from model horizon {spec.T}")
    return grid


def fluctuation_rhs(Lambda_inv, Q, L_c, F_c, kappa):
    """Right-hand side for (A, btilde) stacked as an (n, 2n) array."""
    n = Q.shape[0]

    def rhs(t, z):
        A, B = z[:, :n], z[:, n:]
        AL = A @ Lambda_inv
        return np.concatenate([AL @ A - Q, AL @ B - A @ L_c + B @ kappa - F_c], axis=1)

    return rhs


def solve_fluctuation_system(
    spec: ModelSpec, grid: TimeGrid | None = None, *, bound: float = BLOWUP_BOUND
) -> Fluctuation:
    """A' = A Lambda^{-1} A - Q, A_T = P and the matching loading on ctilde.

    btilde' = A Lambda^{-1} btilde - A L_c + btilde kappa - F_c, btilde_T = G_c,
    where kappa is the idiosyncratic mean-reversion matrix.
    """
    grid = _grid_of(spec, grid)
    lq, n = spec.lq, spec.n
    rhs = fluctuation_rhs(spec.Lambda_inv, lq.Q, lq.L_c, lq.F_c, spec.idio_factor.kappa)
    zT = np.concatenate([lq.P, lq.G_c], axis=1)
    vals, ders = rk4_backward(rhs, zT, grid.nodes, bound=bound, what="fluctuation Riccati")
    mids = hermite_midpoints(vals, ders, grid.dt)
    return Fluctuation(vals[:, :, :n], vals[:, :, n:], mids[:, :, :n], mids[:, :, n:])


def solve_mean_system(spec: ModelSpec, grid: TimeGrid | None = None, *, bound: float = BLOWUP_BOUND) -> MeanSystem:
    """Backward ODEs for ybar = Abar xbar + beta c0 + beta0.

    With the price equal to -ybar the averaged control vanishes, so xbar is
    driven by the OTC flow only:
        Abar'  = Abar K_l Abar + F_phi Abar - Q
        beta'  = Abar K_l beta - Abar L_c0 + beta kappa0 + F_phi beta - F_c0
        beta0' = Abar K_l beta0 - Abar (L_c cbar + l) - beta kappa0 theta0
                 + F_phi beta0 - F_c cbar - f
    with terminal values (P, G_c0, G_c cbar_T + g) / (1 - delta).
    """
    if not spec.psi.is_identity:
        raise ModelError("the affine mean system requires the identity price map")
    grid = _grid_of(spec, grid)
    lq, n = spec.lq, spec.n
    K, Fp = lq.K_l, lq.F_phi
    kap0 = spec.common_factor.kappa
    drift0 = kap0 @ spec.common_factor.theta
    idio = spec.idio_factor

    def rhs(t, z):
        Ab, b, b0 = z[:, :n], z[:, n : 2 * n], z[:, 2 * n]
        cbar = idio.mean_path([t])[0]
        AK = Ab @ K
        return np.concatenate(
            [
                AK @ Ab + Fp @ Ab - lq.Q,
                AK @ b - Ab @ lq.L_c0 + b @ kap0 + Fp @ b - lq.F_c0,
                (AK @ b0 - Ab @ (lq.L_c @ cbar + lq.l_const) - b @ drift0 + Fp @ b0 - lq.F_c @ cbar - lq.f_const)[
                    :, None
                ],
            ],
            axis=1,
        )

    w = 1.0 / (1.0 - spec.delta)
    cbar_T = idio.mean_path([spec.T])[0]
    zT = np.concatenate([w * lq.P, w * lq.G_c0, (w * (lq.G_c @ cbar_T + lq.g_const))[:, None]], axis=1)
    vals, ders = rk4_backward(rhs, zT, grid.nodes, bound=bound, what="mean-system Riccati")
    mids = hermite_midpoints(vals, ders, grid.dt)
    split = lambda z: (z[:, :, :n], z[:, :, n : 2 * n], z[:, :, 2 * n])  # noqa: E731
    return MeanSystem(*split(vals), *split(mids))


def solve_affine(spec: ModelSpec, grid: TimeGrid | None = None, *, bound: float = BLOWUP_BOUND) -> AffineSolution:
    grid = _grid_of(spec, grid)
    fl = solve_fluctuation_system(spec, grid, bound=bound)
    ms = solve_mean_system(spec, grid, bound=bound)
    sym_err = lambda a: float(np.max(np.abs(a - np.swapaxes(a, 1, 2))))  # noqa: E731
    diag = {
        "max_abs_A": float(np.max(np.abs(fl.A))),
        "max_abs_Abar": float(np.max(np.abs(ms.Abar))),
        "asymmetry_A": sym_err(fl.A),
        "asymmetry_Abar": sym_err(ms.Abar),
        "bound": bound,
        "steps": grid.S,
    }
    return AffineSolution(
        grid,
        fl.A,
        fl.beta_tilde,
        ms.Abar,
        ms.beta,
        ms.beta0,
        fl.A_mid,
        fl.beta_tilde_mid,
        ms.Abar_mid,
        ms.beta_mid,
        ms.beta0_mid,
        spec.fingerprint(),
        diag,
    )


# ------------------------------------------------------------------ forward propagation


@dataclass(frozen=True, eq=False)
class StepMaps:
    """z_{k+1} = Phi z_k + J u_k + d + R eps_k + N dW_k for each grid step.

    u is an OU input observed at the nodes and eps_k its innovation
    u_{k+1} - E[u_{k+1} | u_k].  Within a step the innovation is spread
    linearly in time and the Brownian increment uniformly.
    """

    Phi: np.ndarray  # (S, n, n)
    J: np.ndarray  # (S, n, p)
    d: np.ndarray  # (S, n)
    R: np.ndarray  # (S, n, p)
    N: np.ndarray  # (S, n, q)
    decay: np.ndarray  # (p,)
    drift: np.ndarray  # (p,)

    def innovations(self, u: np.ndarray) -> np.ndarray:
        """Innovations of a time-major input of shape (S+1, ..., p)."""
        return u[1:] - (self.decay * u[:-1] + self.drift)

    def propagate_tm(self, z0: np.ndarray, u: np.ndarray, dW: np.ndarray) -> np.ndarray:
        """Time-major propagation: u (S+1, B, p), dW (S, B, q) -> z (S+1, B, n)."""
        T = lambda a: np.swapaxes(a, 1, 2)  # noqa: E731
        eps = self.innovations(u)
        forcing = u[:-1] @ T(self.J) + eps @ T(self.R) + dW @ T(self.N) + self.d[:, None, :]
        S = self.Phi.shape[0]
        z = np.empty((S + 1,) + z0.shape)
        z[0] = z0
        if z0.shape[-1] == 1:
            phi = self.Phi[:, 0, 0]
            for k in range(S):
                np.multiply(z[k], phi[k], out=z[k + 1])
                z[k + 1] += forcing[k]
        else:
            for k in range(S):
                np.matmul(z[k], self.Phi[k].T, out=z[k + 1])
                z[k + 1] += forcing[k]
        return z

    def propagate(self, z0: np.ndarray, u: np.ndarray, dW: np.ndarray) -> np.ndarray:
        """Paths of z for inputs of shape (..., S+1, p) and (..., S, q)."""
        lead = z0.shape[:-1]
        flat = lambda a: np.ascontiguousarray(np.moveaxis(a.reshape((-1,) + a.shape[-2:]), 1, 0))  # noqa: E731
        z0b = np.broadcast_to(z0, lead + z0.shape[-1:]).reshape(-1, z0.shape[-1])
        z = self.propagate_tm(z0b, flat(np.broadcast_to(u, lead + u.shape[-2:])), flat(dW))
        return np.moveaxis(z, 0, 1).reshape(lead + (z.shape[0], z.shape[2]))


def affine_step_maps(M, H, f, Sigma, ou: OUSpec, h: float, *, theta=None) -> StepMaps:
    """Step maps for z' = M(t) z + H(t) u + f(t) + Sigma dW/dt.

    ``M``, ``H``, ``f`` are triples (node values k, midpoint values, node
    values k+1) each of shape (S, ...).  The variational system over one step
    is solved with a single RK4 step.
    """
    M0, Mh, M1 = M
    H0, Hh, H1 = H
    f0, fh, f1 = f
    S, n, _ = M0.shape
    p = H0.shape[2]
    q = Sigma.shape[1]
    rates = ou.rates
    theta = ou.theta if theta is None else np.asarray(theta, dtype=float)

    def forcing(Hs, fs, s):
        e = np.exp(-rates * s)
        G = np.zeros((S, n, 2 * p + q + 1))
        G[:, :, :p] = Hs * e
        G[:, :, p : 2 * p] = Hs * (s / h)
        G[:, :, 2 * p : 2 * p + q] = Sigma / h
        G[:, :, -1] = fs + Hs @ ((1.0 - e) * theta)
        return G

    width = n + 2 * p + q + 1
    Z0 = np.zeros((S, n, width))
    Z0[:, :, :n] = np.eye(n)
    G0, Gh, G1 = forcing(H0, f0, 0.0), forcing(Hh, fh, 0.5 * h), forcing(H1, f1, h)
    Gz0 = np.concatenate([np.zeros((S, n, n)), G0], axis=2)
    Gzh = np.concatenate([np.zeros((S, n, n)), Gh], axis=2)
    Gz1 = np.concatenate([np.zeros((S, n, n)), G1], axis=2)
    k1 = M0 @ Z0 + Gz0
    k2 = Mh @ (Z0 + 0.5 * h * k1) + Gzh
    k3 = Mh @ (Z0 + 0.5 * h * k2) + Gzh
    k4 = M1 @ (Z0 + h * k3) + Gz1
    Z1 = Z0 + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    a = np.exp(-rates * h)
    return StepMaps(
        Phi=Z1[:, :, :n],
        J=Z1[:, :, n : n + p],
        R=Z1[:, :, n + p : n + 2 * p],
        N=Z1[:, :, n + 2 * p : n + 2 * p + q],
        d=Z1[:, :, -1],
        decay=a,
        drift=(1.0 - a) * theta,
    )


def _triple(node_vals, mid_vals):
    return node_vals[:-1], mid_vals, node_vals[1:]


def mean_step_maps(spec: ModelSpec, sol: AffineSolution) -> StepMaps:
    """Step maps for xbar driven by (W0, c0)."""
    lq, grid = spec.lq, sol.grid
    K = lq.K_l
    cbar = spec.idio_factor.mean_path(grid.nodes)
    cbar_mid = spec.idio_factor.mean_path(grid.nodes[:-1] + 0.5 * grid.dt)

    def drift(b0, cb):
        return -b0 @ K.T + cb @ lq.L_c.T + lq.l_const

    M = _triple(-K @ sol.Abar, -K @ sol.Abar_mid)
    H = _triple(lq.L_c0 - K @ sol.beta, lq.L_c0 - K @ sol.beta_mid)
    f = _triple(drift(sol.beta0, cbar), drift(sol.beta0_mid, cbar_mid))
    return affine_step_maps(M, H, f, lq.sigma0, spec.common_factor, grid.dt)


def fluctuation_step_maps(spec: ModelSpec, sol: "Fluctuation | AffineSolution", grid: TimeGrid) -> StepMaps:
    """Step maps for Xtilde driven by (W, ctilde); ctilde mean-reverts to zero."""
    lq = spec.lq
    Li = spec.Lambda_inv
    S, n = grid.S, spec.n
    M = _triple(-Li @ sol.A, -Li @ sol.A_mid)
    H = _triple(lq.L_c - Li @ sol.beta_tilde, lq.L_c - Li @ sol.beta_tilde_mid)
    zero = np.zeros((S, n))
    return affine_step_maps(M, H, (zero, zero, zero), lq.sigma, spec.idio_factor, grid.dt, theta=np.zeros(n))


def fluctuation_paths(spec: ModelSpec, sol: "Fluctuation | AffineSolution", grid: TimeGrid, maps: StepMaps, dW, c, xi):
    """(Xtilde, Ytilde) for idiosyncratic inputs with leading batch axes."""
    cbar = spec.idio_factor.mean_path(grid.nodes)
    ct = c - cbar
    Xt = maps.propagate(xi - spec.xi_mean, ct, dW)
    return Xt, loadings_apply(sol.A, Xt) + loadings_apply(sol.beta_tilde, ct)


def fluctuation_paths_tm(spec: ModelSpec, sol, grid: TimeGrid, maps: StepMaps, dW, c, xi):
    """Time-major variant: dW (S, B, d), c (S+1, B, n), xi (B, n)."""
    ct = c - spec.idio_factor.mean_path(grid.nodes)[:, None, :]
    Xt = maps.propagate_tm(xi - spec.xi_mean, ct, dW)
    T = lambda a: np.swapaxes(a, 1, 2)  # noqa: E731
    return Xt, Xt @ T(sol.A) + ct @ T(sol.beta_tilde)


def loadings_apply(L, z):
    """Apply node-wise matrices L (S+1, n, m) to paths z (..., S+1, m)."""
    return np.einsum("kij,...kj->...ki", L, z)


def _check_grids(*grids: TimeGrid):
    g0 = grids[0]
    for g in grids[1:]:
        if g.S != g0.S or abs(g.T - g0.T) > 1e-12 * max(1.0, g0.T):
            raise GridMismatch(f"grid mismatch: (T={g0.T}, S={g0.S}) vs (T={g.T}, S={g.S})")


def reconstruct_paths(
    spec: ModelSpec, grid: TimeGrid, scenarios: ScenarioSet, sol: AffineSolution
) -> EquilibriumSolution:
    """Simulate xbar, ybar per common path and Xtilde, Ytilde per copy."""
    _check_grids(grid, sol.grid, scenarios.grid)
    mean_maps = mean_step_maps(spec, sol)
    M = scenarios.M
    xbar = mean_maps.propagate(np.broadcast_to(spec.xi_mean, (M, spec.n)), scenarios.c0, scenarios.dW0)
    ybar = sol.ybar(xbar, scenarios.c0)
    phi = -ybar

    maps = fluctuation_step_maps(spec, sol, grid)
    Xt, Yt = fluctuation_paths(spec, sol, grid, maps, scenarios.dW, scenarios.c, scenarios.xi)
    X = xbar[:, None] + Xt
    Y = ybar[:, None] + Yt
    alpha = hamiltonian_minimizer(Y, phi[:, None], spec.Lambda)
    return EquilibriumSolution(
        grid=grid,
        mode="lq",
        phi=phi,
        xbar=xbar,
        ybar=ybar,
        c0=np.array(scenarios.c0),
        X=X,
        Y=Y,
        alpha=alpha,
        Lambda=spec.Lambda,
        spec_hash=spec.fingerprint(),
        master_seed=scenarios.master_seed,
        diagnostics={"iterations": 0, "final_residual": 0.0, "damping": None, **sol.diagnostics},
        affine=sol,
    )


def martingale_residual(spec: ModelSpec, solution: EquilibriumSolution) -> np.ndarray:
    """Increments of ybar_t + int_0^t (Q xbar + F_phi phi + F_c0 c0 + F_c cbar + f) ds.

    Trapezoid in time; shape (M, S, n).  For an exact solution these are
    martingale increments, uncorrelated with anything known at their start.
    """
    grid = solution.grid
    cbar = spec.idio_factor.mean_path(grid.nodes)
    drift = spec.running_marginal(solution.xbar, solution.phi, solution.c0, cbar)
    return np.diff(solution.ybar, axis=1) + 0.5 * grid.dt * (drift[:, 1:] + drift[:, :-1])


def riccati_table(sol: AffineSolution) -> tuple[list[str], np.ndarray]:
    """Column names and rows for the coefficient dump."""
    n = sol.A.shape[1]
    idx = [f"{i + 1}{j + 1}" for i in range(n) for j in range(n)]
    cols = ["t"] + [f"A_{s}" for s in idx] + [f"Abar_{s}" for s in idx] + [f"beta_{s}" for s in idx]
    cols += [f"beta0_{i + 1}" for i in range(n)]
    S1 = sol.A.shape[0]
    rows = np.concatenate(
        [
            sol.grid.nodes[:, None],
            sol.A.reshape(S1, -1),
            sol.Abar.reshape(S1, -1),
            sol.beta.reshape(S1, -1),
            sol.beta0,
        ],
        axis=1,
    )
    return cols, rows


# ------------------------------------------------------------------ Euler cross-check


def euler_forward(spec: ModelSpec, sol: AffineSolution, scenarios: ScenarioSet) -> np.ndarray:
    """Euler-Maruyama of the closed-loop state with the affine feedback.

    The conditional mean and the fluctuation are stepped separately, each
    with the control and OTC flow evaluated at the left node.  Returns X
    with shape (M, K, S+1, n).
    """
    grid = sol.grid
    _check_grids(grid, scenarios.grid)
    h, S = grid.dt, grid.S
    lq, Li = spec.lq, spec.Lambda_inv
    cbar = spec.idio_factor.mean_path(grid.nodes)
    xbar = np.broadcast_to(spec.xi_mean, (scenarios.M, spec.n)).copy()
    Xt = scenarios.xi - spec.xi_mean
    out = np.empty(scenarios.c.shape[:2] + (S + 1, spec.n))
    out[:, :, 0] = xbar[:, None] + Xt
    for k in range(S):
        c0 = scenarios.c0[:, k]
        ct = scenarios.c[:, :, k] - cbar[k]
        ybar = xbar @ sol.Abar[k].T + c0 @ sol.beta[k].T + sol.beta0[k]
        phi = -ybar
        mean_flow = spec.otc_flow(phi, c0, cbar[k])  # the mean control vanishes at phi = -ybar
        fl_flow = -(Xt @ sol.A[k].T + ct @ sol.beta_tilde[k].T) @ Li.T + ct @ lq.L_c.T
        xbar = xbar + h * mean_flow + scenarios.dW0[:, k] @ lq.sigma0.T
        Xt = Xt + h * fl_flow + scenarios.dW[:, :, k] @ lq.sigma.T
        out[:, :, k + 1] = xbar[:, None] + Xt
    return out


def euler_cross_check(spec: ModelSpec, scenarios: ScenarioSet, refinements: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """RMS gap between Euler paths and the reconstruction on successively halved grids.

    ``scenarios`` lives on the finest grid; level j uses the same draws
    coarsened by 2^(refinements - j).  Returns (gaps, ratios) where
    ratios[j] = gaps[j] / gaps[j + 1].
    """
    gaps = []
    for j in range(refinements + 1):
        sc = coarsen(scenarios, 2 ** (refinements - j))
        sol = solve_affine(spec, sc.grid)
        exact = reconstruct_paths(spec, sc.grid, sc, sol).X
        gaps.append(math.sqrt(float(np.mean((euler_forward(spec, sol, sc) - exact) ** 2))))
    gaps = np.array(gaps)
    return gaps, gaps[:-1] / gaps[1:]
