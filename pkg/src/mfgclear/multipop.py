"""Several populations trading the same securities.

Population p has weight n_p, trading-cost matrix Lambda_p and its own LQ
blocks.  With Lhat_p = n_p Lambda_p^{-1} and Xi = (sum_p Lhat_p)^{-1} the
clearing price is phi = -Xi sum_p Lhat_p ybar^p.  The mean system of all
populations is stacked into one (m n)-dimensional affine system.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import block_diag

from .clearing import (
    DEFAULT_Q,
    ClearingReport,
    _check_sweep_args,
    _Kernel,
    build_report,
    cell_flows,
)
from .lq_affine import (
    BLOWUP_BOUND,
    RiccatiBlowUp,
    affine_step_maps,
    fluctuation_paths,
    fluctuation_step_maps,
    hermite_midpoints,
    loadings_apply,
    rk4_backward,
    solve_fluctuation_system,
)
from .mfg_solver import PROBE_TOL, ProbeReport, _draw_batch
from .model import (
    GENERAL,
    AssumptionError,
    LQCoefficients,
    ModelError,
    ModelSpec,
    hamiltonian_minimizer,
    validate_model,
)
from .solution import EquilibriumSolution
from .stochastics import (
    POP_STRIDE,
    ROLE_AGENT,
    ROLE_PROBE,
    OUSpec,
    TimeGrid,
    build_scenarios,
    stream,
)

SHORT_T = "short-T"
GENERAL_T = "general-T"
WEIGHT_TOL = 1e-12


@dataclass(frozen=True)
class PopulationSpec:
    weight: float
    Lambda: np.ndarray
    lq: LQCoefficients
    idio_factor: OUSpec | None = None
    xi_mean: np.ndarray | None = None
    xi_cov: np.ndarray | None = None


@dataclass(frozen=True)
class MultiPopSpec:
    n: int
    d0: int
    d: int
    T: float
    S: int
    delta: float
    populations: tuple
    common_factor: OUSpec | None = None
    mode: str = SHORT_T

    def __post_init__(self):
        if self.mode not in (SHORT_T, GENERAL_T):
            raise ModelError(f"mode must be {SHORT_T!r} or {GENERAL_T!r}, got {self.mode!r}")
        pops = tuple(self.populations)
        if not pops:
            raise ModelError("at least one population is required")
        object.__setattr__(self, "populations", pops)
        w = np.array([p.weight for p in pops], dtype=float)
        if np.any(w <= 0) or abs(w.sum() - 1.0) > WEIGHT_TOL:
            raise ModelError(f"population weights must be positive and sum to 1, got {w.tolist()}")
        # building each population model checks shapes and the common factor
        models = tuple(self.population_model(p) for p in range(len(pops)))
        object.__setattr__(self, "_models", models)
        try:
            np.linalg.inv(sum(self.Lambda_hat(p) for p in range(self.m)))
        except np.linalg.LinAlgError as exc:
            raise ModelError("sum of weighted inverse trading costs is singular") from exc
        if self.mode == GENERAL_T:
            lam0 = models[0].Lambda
            if any(not np.array_equal(mdl.Lambda, lam0) for mdl in models):
                raise ModelError("general-T mode requires the same Lambda for every population")
            if np.any(np.abs(w - 1.0 / self.m) > WEIGHT_TOL):
                raise ModelError("general-T mode requires equal weights 1/m")

    @property
    def m(self) -> int:
        return len(self.populations)

    @property
    def weights(self) -> np.ndarray:
        return np.array([p.weight for p in self.populations])

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.T, self.S)

    def population_model(self, p: int) -> ModelSpec:
        models = self.__dict__.get("_models")
        if models is not None:
            return models[p]
        pop = self.populations[p]
        return ModelSpec(
            self.n,
            self.d0,
            self.d,
            self.T,
            self.S,
            pop.Lambda,
            self.delta,
            pop.lq,
            common_factor=self.common_factor,
            idio_factor=pop.idio_factor,
            xi_mean=pop.xi_mean,
            xi_cov=pop.xi_cov,
            mode=GENERAL,
        )

    def Lambda_hat(self, p: int) -> np.ndarray:
        return self.populations[p].weight * self.population_model(p).Lambda_inv

    @property
    def Xi_hat(self) -> np.ndarray:
        return np.linalg.inv(sum(self.Lambda_hat(p) for p in range(self.m)))

    @property
    def price_weights(self) -> np.ndarray:
        """Blocks Xi Lhat_p stacked side by side, shape (n, m n)."""
        Xi = self.Xi_hat
        return np.concatenate([Xi @ self.Lambda_hat(p) for p in range(self.m)], axis=1)

    def fingerprint(self) -> str:
        parts = [self.population_model(p).fingerprint() for p in range(self.m)]
        parts += [repr(self.weights.tolist()), self.mode]
        return hashlib.sha256("|".join(parts).encode()).hexdigest()


def aggregate_price(ybars, spec: MultiPopSpec) -> np.ndarray:
    """phi = -Xi sum_p Lhat_p ybar^p; ``ybars`` has the population axis first."""
    ybars = np.asarray(ybars, dtype=float)
    if ybars.shape[0] != spec.m:
        raise ValueError(f"expected {spec.m} populations on axis 0")
    Xi = spec.Xi_hat
    acc = sum(ybars[p] @ (Xi @ spec.Lambda_hat(p)).T for p in range(spec.m))
    return -acc


def multipop_terminal(x_T, c0_T, c_T, cond_means, spec: MultiPopSpec) -> np.ndarray:
    """Terminal adjoints per population.

    Y_T^p = delta/(1-delta) Xi sum_q Lhat_q E[dg_q | common] + dg_p(x_T^p, c0_T, c_T^p).
    """
    if not spec.delta < 1:
        raise ModelError("delta must be < 1")
    cond_means = np.asarray(cond_means, dtype=float)
    shared = -aggregate_price(cond_means, spec)
    w = spec.delta / (1.0 - spec.delta)
    out = []
    for p in range(spec.m):
        mdl = spec.population_model(p)
        out.append(w * shared + mdl.terminal_marginal(np.asarray(x_T[p]), np.asarray(c0_T), np.asarray(c_T[p])))
    return np.array(out)


# ------------------------------------------------------------------ stacked mean system


@dataclass(frozen=True, eq=False)
class StackedMean:
    Abar: np.ndarray  # (S+1, mn, mn)
    beta: np.ndarray  # (S+1, mn, n)
    beta0: np.ndarray  # (S+1, mn)
    Abar_mid: np.ndarray
    beta_mid: np.ndarray
    beta0_mid: np.ndarray
    B: np.ndarray  # mean-drift feedback matrix


def _stack(spec: MultiPopSpec, name: str):
    return np.concatenate([getattr(spec.population_model(p).lq, name) for p in range(spec.m)], axis=0)


def _stacked_offsets(spec: MultiPopSpec, times, mat: str, const: str):
    """Per-population mat_p cbar^p(t) + const_p, stacked: shape (len(times), m n)."""
    out = []
    for p in range(spec.m):
        mdl = spec.population_model(p)
        cb = mdl.idio_factor.mean_path(times)
        out.append(cb @ getattr(mdl.lq, mat).T + getattr(mdl.lq, const))
    return np.concatenate(out, axis=1)


def solve_stacked_mean_system(spec: MultiPopSpec, grid: TimeGrid, *, bound: float = BLOWUP_BOUND) -> StackedMean:
    """Stacked backward ODEs for ybar = Abar xbar + beta c0 + beta0 (all populations).

    With W the price weights, E the stacked identity and D = blockdiag(Lambda_p^{-1}),
    the mean drift of x is -B ybar + ... where B = D (I - E W) + K W, and
        Abar'  = Abar B Abar - Qb + Fb W Abar
        beta'  = Abar B beta - Abar Lc0 + beta kappa0 + Fb W beta - Fc0
        beta0' = Abar B beta0 - Abar lc(t) - beta kappa0 theta0 + Fb W beta0 - fc(t)
    Terminal values carry the factor I + delta/(1-delta) E W.
    """
    n, m = spec.n, spec.m
    mn = m * n
    W = spec.price_weights
    E = np.tile(np.eye(n), (m, 1))
    D = block_diag(*[spec.population_model(p).Lambda_inv for p in range(m)])
    K = _stack(spec, "K_l")
    B = D @ (np.eye(mn) - E @ W) + K @ W
    Qb = block_diag(*[spec.population_model(p).lq.Q for p in range(m)])
    Pb = block_diag(*[spec.population_model(p).lq.P for p in range(m)])
    FW = _stack(spec, "F_phi") @ W
    Lc0, Fc0, Gc0 = _stack(spec, "L_c0"), _stack(spec, "F_c0"), _stack(spec, "G_c0")
    cf = spec.population_model(0).common_factor
    kap0, drift0 = cf.kappa, cf.kappa @ cf.theta

    def rhs(t, z):
        Ab, b, b0 = z[:, :mn], z[:, mn : mn + n], z[:, mn + n]
        lc = _stacked_offsets(spec, [t], "L_c", "l_const")[0]
        fc = _stacked_offsets(spec, [t], "F_c", "f_const")[0]
        AB = Ab @ B
        return np.concatenate(
            [
                AB @ Ab - Qb + FW @ Ab,
                AB @ b - Ab @ Lc0 + b @ kap0 + FW @ b - Fc0,
                (AB @ b0 - Ab @ lc - b @ drift0 + FW @ b0 - fc)[:, None],
            ],
            axis=1,
        )

    MT = np.eye(mn) + spec.delta / (1.0 - spec.delta) * E @ W
    gT = _stacked_offsets(spec, [spec.T], "G_c", "g_const")[0]
    zT = np.concatenate([MT @ Pb, MT @ Gc0, (MT @ gT)[:, None]], axis=1)
    try:
        vals, ders = rk4_backward(rhs, zT, grid.nodes, bound=bound, what="stacked mean-system Riccati")
    except RiccatiBlowUp as exc:
        hint = "shorten T, or restrict to equal Lambda_p and equal weights (general-T mode)"
        raise RiccatiBlowUp(exc.node, exc.time, exc.bound, "stacked mean-system Riccati", hint) from None
    mids = hermite_midpoints(vals, ders, grid.dt)
    split = lambda z: (z[:, :, :mn], z[:, :, mn : mn + n], z[:, :, mn + n])  # noqa: E731
    return StackedMean(*split(vals), *split(mids), B)


def stacked_riccati_table(mean: StackedMean, grid: TimeGrid, n: int) -> tuple[list[str], np.ndarray]:
    """Coefficient dump of the stacked mean system: t, Abar_ij, beta_ij, beta0_i."""
    mn = mean.Abar.shape[1]
    cols = ["t"] + [f"Abar_{i + 1}{j + 1}" for i in range(mn) for j in range(mn)]
    cols += [f"beta_{i + 1}{j + 1}" for i in range(mn) for j in range(n)]
    cols += [f"beta0_{i + 1}" for i in range(mn)]
    S1 = grid.S + 1
    rows = np.concatenate(
        [grid.nodes[:, None], mean.Abar.reshape(S1, -1), mean.beta.reshape(S1, -1), mean.beta0], axis=1
    )
    return cols, rows


@dataclass(frozen=True, eq=False)
class MultiPopSolution:
    grid: TimeGrid
    phi: np.ndarray  # (M, S+1, n)
    populations: tuple  # EquilibriumSolution per population, sharing phi
    mean: StackedMean
    weights: np.ndarray
    spec_hash: str
    diagnostics: dict = field(default_factory=dict)

    @property
    def M(self) -> int:
        return self.phi.shape[0]

    @property
    def ybars(self) -> np.ndarray:
        """(m, M, S+1, n)."""
        return np.stack([p.ybar for p in self.populations])

    def in_sample_price(self, spec: MultiPopSpec) -> np.ndarray:
        return aggregate_price(np.stack([p.Y.mean(axis=1) for p in self.populations]), spec)

    def in_sample_clearing_residual(self, spec: MultiPopSpec) -> float:
        """max |sum_p n_p copy-average Lambda_p^{-1}(Y^p + phi_in)|."""
        phi = self.in_sample_price(spec)[:, None]
        acc = 0.0
        for p, sol in enumerate(self.populations):
            acc = acc + spec.weights[p] * hamiltonian_minimizer(sol.Y, phi, sol.Lambda).mean(axis=1)
        return float(np.max(np.abs(acc)))


def build_multipop_scenarios(spec: MultiPopSpec, grid: TimeGrid, M: int, K: int, seed: int, workers=None):
    return [
        build_scenarios(spec.population_model(p), grid, M, K, seed, population=p, workers=workers)
        for p in range(spec.m)
    ]


def solve_multipop_lq(
    spec: MultiPopSpec,
    grid: TimeGrid | None = None,
    scenarios=None,
    *,
    allow_short_t: bool = False,
) -> MultiPopSolution:
    """Exact LQ equilibrium of the coupled populations.

    ``scenarios`` is a list with one ScenarioSet per population, all built
    from the same master seed so that they share the common noise.
    """
    grid = grid or spec.grid
    reports = [validate_model(spec.population_model(p)) for p in range(spec.m)]
    if spec.mode == GENERAL_T and not allow_short_t and not all(r.solvable for r in reports):
        bad = [p + 1 for p, r in enumerate(reports) if not r.solvable]
        raise AssumptionError(f"populations {bad} fail the general-horizon checks; pass allow_short_t to proceed")
    if scenarios is None:
        scenarios = build_multipop_scenarios(spec, grid, 1, 2, 0)
    if len(scenarios) != spec.m:
        raise ValueError("need one ScenarioSet per population")
    for sc in scenarios[1:]:
        if not (np.array_equal(sc.c0, scenarios[0].c0) and np.array_equal(sc.dW0, scenarios[0].dW0)):
            raise ValueError("population scenarios must share the common noise")
    n, m = spec.n, spec.m
    mean = solve_stacked_mean_system(spec, grid)

    times_mid = grid.nodes[:-1] + 0.5 * grid.dt
    Lc0 = _stack(spec, "L_c0")
    sig0 = _stack(spec, "sigma0")
    drift = lambda b0, t: -b0 @ mean.B.T + _stacked_offsets(spec, t, "L_c", "l_const")  # noqa: E731
    Mmat = (-mean.B @ mean.Abar[:-1], -mean.B @ mean.Abar_mid, -mean.B @ mean.Abar[1:])
    H = (Lc0 - mean.B @ mean.beta[:-1], Lc0 - mean.B @ mean.beta_mid, Lc0 - mean.B @ mean.beta[1:])
    f_nodes = drift(mean.beta0, grid.nodes)
    f = (f_nodes[:-1], drift(mean.beta0_mid, times_mid), f_nodes[1:])
    common = spec.population_model(0).common_factor
    maps = affine_step_maps(Mmat, H, f, sig0, common, grid.dt)
    sc0 = scenarios[0]
    x0 = np.concatenate([spec.population_model(p).xi_mean for p in range(m)])
    xbar = maps.propagate(np.broadcast_to(x0, (sc0.M, m * n)), sc0.c0, sc0.dW0)
    ybar = loadings_apply(mean.Abar, xbar) + loadings_apply(mean.beta, sc0.c0) + mean.beta0
    ybar_p = np.moveaxis(ybar.reshape(ybar.shape[:-1] + (m, n)), -2, 0)
    xbar_p = np.moveaxis(xbar.reshape(xbar.shape[:-1] + (m, n)), -2, 0)
    phi = aggregate_price(ybar_p, spec)

    pops = []
    for p in range(m):
        mdl = spec.population_model(p)
        fl = solve_fluctuation_system(mdl, grid)
        sc = scenarios[p]
        Xt, Yt = fluctuation_paths(mdl, fl, grid, fluctuation_step_maps(mdl, fl, grid), sc.dW, sc.c, sc.xi)
        X = xbar_p[p][:, None] + Xt
        Y = ybar_p[p][:, None] + Yt
        pops.append(
            EquilibriumSolution(
                grid=grid,
                mode="lq-multipop",
                phi=phi,
                xbar=xbar_p[p],
                ybar=ybar_p[p],
                c0=np.array(sc.c0),
                X=X,
                Y=Y,
                alpha=hamiltonian_minimizer(Y, phi[:, None], mdl.Lambda),
                Lambda=mdl.Lambda,
                spec_hash=mdl.fingerprint(),
                master_seed=sc.master_seed,
                diagnostics={"population": p, "verdict": reports[p].verdict},
                affine=fl,
            )
        )
    return MultiPopSolution(
        grid,
        phi,
        tuple(pops),
        mean,
        spec.weights,
        spec.fingerprint(),
        {"max_abs_Abar": float(np.max(np.abs(mean.Abar)))},
    )


# ------------------------------------------------------------------ clearing


def population_counts(spec: MultiPopSpec, N: int) -> list[int]:
    counts = [int(round(w * N)) for w in spec.weights]
    if min(counts) < 1:
        raise ValueError(f"N = {N} leaves a population without agents (counts {counts})")
    return counts


def multipop_clearing_sweep(
    spec: MultiPopSpec,
    solution: MultiPopSolution,
    N_list,
    reps: int,
    seed: int,
    *,
    q: int = DEFAULT_Q,
    workers: int | None = None,
) -> ClearingReport:
    """Net flow N^{-1} sum_p sum_i alpha^{p,i} with N_p = round(n_p N).

    Each population's mean-field control carries the common-path term
    -Lambda_p^{-1}(ybar^p + phi); these cancel in the weighted sum but leave
    a small residual when rounding makes N_p / N differ from n_p.
    """
    M = solution.M
    N_list = _check_sweep_args(N_list, reps, M)
    if solution.spec_hash != spec.fingerprint():
        raise ModelError("solution was produced for a different model")
    kernels, offsets = [], []
    for p, sol in enumerate(solution.populations):
        mdl = spec.population_model(p)
        kernels.append(_Kernel(mdl, solution.grid, sol.affine))
        off = hamiltonian_minimizer(sol.ybar, solution.phi, mdl.Lambda)
        offsets.append(off if np.any(off != 0) else None)
    roles = [ROLE_AGENT + POP_STRIDE * p for p in range(spec.m)]
    cells = [(r, m) for r in range(reps) for m in range(M)]
    results = [
        cell_flows(
            kernels, population_counts(spec, N), seed, cells, solution.grid, workers, roles, offsets, total_N=N
        )
        for N in N_list
    ]
    g = _pooled_gamma_hat(solution, spec.weights, q)
    return build_report(spec.n, N_list, reps, M, results, g, q, populations=spec.m)


def _pooled_gamma_hat(solution: MultiPopSolution, weights, q: int) -> float:
    moments = sum(
        w * np.mean(np.sqrt(np.sum(sol.Y**2, axis=-1)) ** q, axis=(0, 1))
        for w, sol in zip(weights, solution.populations)
    )
    return float(np.max(moments ** (1.0 / q)))


# ------------------------------------------------------------------ stacked probe


def multipop_monotonicity_probe(spec: MultiPopSpec, sample_count: int = 1000, seed: int = 0, batch: int = 32):
    """Population-stacked version of the three monotonicity inequalities.

    Constants are taken uniformly over populations.  The averaged price
    direction is a = sum_p Xi Lhat_p E[dy^p | G].  The OTC flow of
    population p is evaluated at its own idiosyncratic factor c^p.
    """
    m, n = spec.m, spec.n
    models = [spec.population_model(p) for p in range(m)]
    reps = [validate_model(mdl) for mdl in models]
    gamma_l = max(min(r.gamma_l for r in reps), 0.0)
    gamma_f = min(r.gamma_f for r in reps)
    L = max(r.L_phi for r in reps)
    gamma_g = min(r.gamma_g for r in reps)
    gap = gamma_f - L**2 / (4 * gamma_l) if gamma_l > 0 else -math.inf
    gamma = min(gap, gamma_g)
    wts = spec.weights
    Wb = [spec.Xi_hat @ spec.Lambda_hat(p) for p in range(m)]
    rng = stream(seed, ROLE_PROBE, 1)
    worst = {"B": math.inf, "F": math.inf, "G": math.inf}
    count = dict.fromkeys(worst, 0)

    for _ in range(sample_count):
        groups = rng.integers(0, 2, batch)
        draws = [_draw_batch(rng, n, batch, None) for _ in range(m)]
        c0 = draws[0][1]

        def cond(v):
            out = np.empty_like(v)
            for g in (0, 1):
                sel = groups == g
                if np.any(sel):
                    out[sel] = v[sel].mean(axis=0)
            return out

        def price(ys):
            return -sum(cond(ys[p]) @ Wb[p].T for p in range(m))

        x = [d[0][0] for d in draws]
        xp = [d[0][1] for d in draws]
        y = [d[0][2] for d in draws]
        yp = [d[0][3] for d in draws]
        cs = [d[2] for d in draws]
        phi, phip = price(y), price(yp)
        a = -(phi - phip)
        e_a2 = float(np.mean(np.sum(a**2, axis=1)))
        inner = lambda u, v: float(np.mean(np.sum(u * v, axis=1)))  # noqa: E731
        sB = sF = sG = 0.0
        dx2 = 0.0
        dgs, dgps = [], []
        for p, mdl in enumerate(models):
            Li = mdl.Lambda_inv
            Bv = lambda yy, ph: -(yy - cond(yy)) @ Li.T + mdl.otc_flow(ph, c0, cs[p])  # noqa: E731
            Fv = lambda xx, ph: -mdl.running_marginal(xx, ph, c0, cs[p])  # noqa: E731
            dy, dx = y[p] - yp[p], x[p] - xp[p]
            sB += wts[p] * inner(Bv(y[p], phi) - Bv(yp[p], phip), dy)
            sF += wts[p] * inner(Fv(x[p], phi) - Fv(xp[p], phip), dx)
            dx2 += wts[p] * float(np.mean(np.sum(dx**2, axis=1)))
            dgs.append(mdl.terminal_marginal(x[p], c0, cs[p]))
            dgps.append(mdl.terminal_marginal(xp[p], c0, cs[p]))
        shared = -price(dgs) + price(dgps)
        w = spec.delta / (1 - spec.delta)
        for p in range(m):
            sG += wts[p] * inner(w * shared + dgs[p] - dgps[p], x[p] - xp[p])
        slacks = {
            "B": -gamma_l * e_a2 - sB,
            "F": (-gap * dx2 + gamma_l * e_a2 - sF) if gamma_l > 0 else math.nan,
            "G": sG - gamma * dx2,
        }
        for k, s in slacks.items():
            if math.isnan(s):
                continue
            worst[k] = min(worst[k], s)
            if s < -PROBE_TOL * (1 + abs(s)):
                count[k] += 1
    return ProbeReport(sample_count, worst, count, gamma_l, gamma, ("population-stacked",))
