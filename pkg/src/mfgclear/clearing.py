"""Finite-N market-clearing harness.

Agents trade against the mean-field price.  Because the fluctuation system
does not involve the price, agent i's control is -Lambda^{-1} Ytilde^i and
depends only on its own idiosyncratic draws.  Agents are drawn per cell
(replication r, common path m) from the stream (seed, AGENT, r, m).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.integrate import trapezoid

from .lq_affine import fluctuation_paths_tm, fluctuation_step_maps, solve_fluctuation_system
from .model import ModelError, ModelSpec, epsilon_n
from .solution import EquilibriumSolution
from .stochastics import ROLE_AGENT, ROLE_REFERENCE, TimeGrid, sample_idiosyncratic_tm, stream, wasserstein_1d

DEFAULT_Q = 6
AGENTS_PER_CHUNK = 1 << 16


@dataclass(frozen=True)
class ClearingRow:
    N: int
    reps: int
    metric: float
    stderr: float
    epsilon_N: float
    C_hat: float
    breakdown: tuple = ()


@dataclass(frozen=True)
class ClearingReport:
    rows: tuple
    slope: float
    slope_ci: tuple
    gamma_hat: float
    q: int
    common_paths: int
    bound_holds: tuple = ()
    populations: int = 1

    @property
    def N(self):
        return np.array([r.N for r in self.rows])

    @property
    def metric(self):
        return np.array([r.metric for r in self.rows])

    def columns(self) -> list[str]:
        cols = ["N", "reps", "metric", "stderr", "epsilon_N", "C_hat"]
        if self.populations > 1:
            cols += [f"flow_p{p + 1}" for p in range(self.populations)]
        return cols

    def table(self) -> np.ndarray:
        return np.array(
            [[r.N, r.reps, r.metric, r.stderr, r.epsilon_N, r.C_hat, *r.breakdown] for r in self.rows], dtype=float
        )


class _Kernel:
    """Fluctuation step maps shared by every agent of one population."""

    def __init__(self, spec: ModelSpec, grid: TimeGrid, fluct=None):
        self.spec = spec
        self.grid = grid
        self.fl = fluct if fluct is not None else solve_fluctuation_system(spec, grid)
        self.maps = fluctuation_step_maps(spec, self.fl, grid)
        self.Li = spec.Lambda_inv

    def draws(self, seed: int, role: int, r: int, m: int, count: int):
        """Time-major (dW, c, xi) of ``count`` agents from the cell stream."""
        return sample_idiosyncratic_tm(stream(seed, role, r, m), self.spec, self.grid, count)

    def ytilde(self, dW, c, xi):
        """Time-major Ytilde, shape (S+1, B, n)."""
        return fluctuation_paths_tm(self.spec, self.fl, self.grid, self.maps, dW, c, xi)[1]

    def controls(self, dW, c, xi):
        return -(self.ytilde(dW, c, xi) @ self.Li.T)


def _kernel_for(spec: ModelSpec, solution: EquilibriumSolution) -> _Kernel:
    if solution.spec_hash != spec.fingerprint():
        raise ModelError("solution was produced for a different model")
    fl = solution.affine if solution.affine is not None else None
    return _Kernel(spec, solution.grid, fl)


def simulate_agents(solution: EquilibriumSolution, spec: ModelSpec, N: int, seed: int, rep: int = 0) -> np.ndarray:
    """Mean-field controls of N fresh agents on every common path, shape (M, N, S+1, n)."""
    if N < 1:
        raise ValueError("N must be >= 1")
    kern = _kernel_for(spec, solution)
    return np.stack(
        [np.swapaxes(kern.controls(*kern.draws(seed, ROLE_AGENT, rep, m, N)), 0, 1) for m in range(solution.M)]
    )


def net_flow_metric(alpha, grid: TimeGrid) -> float:
    """E int_0^T |N^{-1} sum_i alpha^i_t|^2 dt.

    ``alpha`` has shape (..., N, S+1, n); leading axes are averaged.
    """
    alpha = np.asarray(alpha, dtype=float)
    if alpha.ndim < 3:
        raise ValueError("alpha must have shape (..., N, S+1, n)")
    flow = alpha.mean(axis=-3)
    return float(np.mean(trapezoid(np.sum(flow**2, axis=-1), dx=grid.dt, axis=-1)))


def _chunks(cells, N):
    size = max(1, AGENTS_PER_CHUNK // N)
    return [cells[i : i + size] for i in range(0, len(cells), size)]


def _map(fn, items, workers):
    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def cell_flows(
    kernels, counts, seed: int, cells, grid: TimeGrid, workers=None, roles=None, offsets=None, total_N=None
):
    """Per-cell net-flow integrals for populations with the given agent counts.

    Returns (total, per_population) arrays over cells.  The net flow is
    ``total_N^{-1}`` times the sum of all agents' controls; ``offsets[p]``
    (shape (M, S+1, n)) is a common-path-dependent term added to every
    control of population p.  Chunking depends only on the agent counts, so
    results do not depend on ``workers``.
    """
    roles = roles or [ROLE_AGENT] * len(kernels)
    offsets = offsets or [None] * len(kernels)
    total_N = total_N or sum(counts)

    def run(chunk):
        flows = []
        for kern, Np, role, off in zip(kernels, counts, roles, offsets):
            draws = [kern.draws(seed, role, r, m, Np) for r, m in chunk]
            dW = np.concatenate([d[0] for d in draws], axis=1)
            c = np.concatenate([d[1] for d in draws], axis=1)
            xi = np.concatenate([d[2] for d in draws])
            alpha = kern.controls(dW, c, xi).reshape((grid.S + 1, len(chunk), Np, -1))
            flow = alpha.sum(axis=2)
            if off is not None:
                flow += Np * np.swapaxes(off[[m for _, m in chunk]], 0, 1)
            flows.append(flow / total_N)
        total = sum(flows)
        integ = lambda f: trapezoid(np.sum(f**2, axis=-1), dx=grid.dt, axis=0)  # noqa: E731
        return integ(total), np.stack([integ(f) for f in flows], axis=-1)

    parts = _map(run, _chunks(list(cells), max(counts)), workers)
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def gamma_hat(solution: EquilibriumSolution, q: int = DEFAULT_Q) -> float:
    """sup_t E[|Y_t|^q]^{1/q} over all copies."""
    norms = np.sqrt(np.sum(solution.Y**2, axis=-1))
    return float(np.max(np.mean(norms**q, axis=(0, 1)) ** (1.0 / q)))


def fit_slope(N, metric):
    fit = stats.linregress(np.log(N), np.log(metric))
    df = len(N) - 2
    half = stats.t.ppf(0.975, df) * fit.stderr if df > 0 else math.inf
    return float(fit.slope), (float(fit.slope - half), float(fit.slope + half))


def _check_sweep_args(N_list, reps, M):
    N_list = [int(x) for x in N_list]
    if len(N_list) < 3:
        raise ValueError("N_list needs at least three values for a slope fit")
    if any(b <= a for a, b in zip(N_list, N_list[1:])) or N_list[0] < 1:
        raise ValueError("N_list must be strictly increasing positive integers")
    if reps < 1 or reps * M < 2:
        raise ValueError("need at least two replication cells for a standard error")
    return N_list


def build_report(n, N_list, reps, M, results, g_hat, q, populations=1) -> ClearingReport:
    rows = []
    for N, (vals, per_pop) in zip(N_list, results):
        metric = float(np.mean(vals))
        se = float(np.std(vals, ddof=1) / math.sqrt(vals.size))
        eps = epsilon_n(n, N)
        C = metric / (g_hat**2 * eps) if g_hat > 0 else math.nan
        breakdown = tuple(float(v) for v in np.mean(per_pop, axis=0)) if populations > 1 else ()
        rows.append(ClearingRow(N, reps, metric, se, eps, C, breakdown))
    metrics = np.array([r.metric for r in rows])
    if np.all(metrics > 0):
        slope, ci = fit_slope(np.array(N_list, dtype=float), metrics)
    else:
        slope, ci = math.nan, (math.nan, math.nan)
    C0 = rows[0].C_hat
    holds = tuple(bool(r.metric <= C0 * g_hat**2 * r.epsilon_N * (1 + 1e-12)) for r in rows)
    return ClearingReport(tuple(rows), slope, ci, g_hat, q, M, holds, populations)


def rate_sweep(
    spec: ModelSpec,
    solution: EquilibriumSolution,
    N_list,
    reps: int,
    seed: int,
    *,
    q: int = DEFAULT_Q,
    workers: int | None = None,
) -> ClearingReport:
    """Net-flow metric for each N, with log-log slope and the rate comparison."""
    M = solution.M
    N_list = _check_sweep_args(N_list, reps, M)
    kern = _kernel_for(spec, solution)
    cells = [(r, m) for r in range(reps) for m in range(M)]
    results = [cell_flows([kern], [N], seed, cells, solution.grid, workers) for N in N_list]
    return build_report(spec.n, N_list, reps, M, results, gamma_hat(solution, q), q)


# ------------------------------------------------------------------ Wasserstein


@dataclass(frozen=True)
class WassersteinReport:
    N: int
    times: np.ndarray
    W1: np.ndarray  # (M, nodes)
    W2: np.ndarray
    mean_gap: np.ndarray
    slack: float = 1e-12

    @property
    def w1_le_w2(self) -> np.ndarray:
        return self.W1 <= self.W2 + self.slack

    @property
    def gap_le_w1(self) -> np.ndarray:
        return np.abs(self.mean_gap) <= self.W1 + self.slack

    @property
    def pass_fraction(self) -> float:
        return float(np.mean(self.w1_le_w2 & self.gap_le_w1))

    @property
    def sup_mean_w2_sq(self) -> float:
        return float(np.max(np.mean(self.W2**2, axis=0)))

    def rows(self) -> np.ndarray:
        """Per-node aggregates: (t, N, mean W1, rms W2, mean |gap|)."""
        return np.column_stack(
            [
                self.times,
                np.full(self.times.size, float(self.N)),
                self.W1.mean(axis=0),
                np.sqrt(np.mean(self.W2**2, axis=0)),
                np.abs(self.mean_gap).mean(axis=0),
            ]
        )


def wasserstein_diag(
    solution: EquilibriumSolution,
    spec: ModelSpec,
    N: int,
    nodes,
    seed: int,
    *,
    reference_factor: int = 10,
    rep: int = 0,
) -> WassersteinReport:
    """W1, W2 between N agents' Y_t and a reference sample of size factor*N."""
    if spec.n != 1:
        raise ModelError("Wasserstein diagnostics are only supported for n = 1")
    if reference_factor < 10:
        raise ValueError("the reference sample must be at least 10 times larger than N")
    kern = _kernel_for(spec, solution)
    nodes = np.asarray(nodes, dtype=int)
    Kref = reference_factor * N
    shape = (solution.M, nodes.size)
    W1, W2, gap = np.empty(shape), np.empty(shape), np.empty(shape)
    for m in range(solution.M):
        ya = kern.ytilde(*kern.draws(seed, ROLE_AGENT, rep, m, N))[nodes, :, 0] + solution.ybar[m, nodes, 0, None]
        yr = kern.ytilde(*kern.draws(seed, ROLE_REFERENCE, 0, m, Kref))[nodes, :, 0] + solution.ybar[m, nodes, 0, None]
        for j in range(nodes.size):
            W1[m, j] = wasserstein_1d(ya[j], yr[j], 1)
            W2[m, j] = wasserstein_1d(ya[j], yr[j], 2)
            gap[m, j] = ya[j].mean() - yr[j].mean()
    return WassersteinReport(N, solution.grid.nodes[nodes], W1, W2, gap)


def wasserstein_slope(reports) -> float:
    N = np.array([r.N for r in reports], dtype=float)
    v = np.array([r.sup_mean_w2_sq for r in reports])
    return float(stats.linregress(np.log(N), np.log(v)).slope)
