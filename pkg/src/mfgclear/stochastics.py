"""Time grid, seeded Brownian/OU path generation and empirical helpers.

Every random stream is a Philox generator keyed by
``SeedSequence([master_seed, role, i, j])``, so a path depends only on its
own index and never on the order in which paths are generated.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .model import ModelSpec

# Stream roles.  Idiosyncratic streams of population p use ROLE_IDIO + p * POP_STRIDE.
ROLE_COMMON = 1
ROLE_IDIO = 2
ROLE_AGENT = 3
ROLE_REFERENCE = 4
ROLE_PROBE = 5
POP_STRIDE = 100


def stream(master_seed: int, role: int, *index: int) -> np.random.Generator:
    key = [int(master_seed) & 0xFFFFFFFFFFFFFFFF, int(role), *(int(i) for i in index)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def psd_sqrt(cov: np.ndarray) -> np.ndarray:
    """Symmetric square root of a PSD matrix (tiny negative eigenvalues clipped)."""
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


@dataclass(frozen=True)
class TimeGrid:
    T: float
    S: int

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T!r}")
        if int(self.S) != self.S or self.S < 1:
            raise ValueError(f"S must be a positive integer, got {self.S!r}")
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "S", int(self.S))

    @property
    def dt(self) -> float:
        return self.T / self.S

    @cached_property
    def nodes(self) -> np.ndarray:
        t = np.linspace(0.0, self.T, self.S + 1)
        t.setflags(write=False)
        return t

    @cached_property
    def half_nodes(self) -> np.ndarray:
        t = np.linspace(0.0, self.T, 2 * self.S + 1)
        t.setflags(write=False)
        return t

    def refine(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.T, self.S * factor)


def _expm1_ratio(x: np.ndarray, tau: float) -> np.ndarray:
    """(1 - exp(-x tau)) / x with the limit tau at x = 0."""
    x = np.asarray(x, dtype=float)
    out = np.full(x.shape, float(tau))
    nz = x != 0
    out[nz] = -np.expm1(-x[nz] * tau) / x[nz]
    return out


@dataclass(frozen=True)
class OUSpec:
    """dc = kappa (theta - c) dt + eta dB with diagonal kappa."""

    kappa: np.ndarray
    theta: np.ndarray
    eta: np.ndarray
    c_init: np.ndarray

    def __post_init__(self):
        kappa = np.atleast_2d(np.asarray(self.kappa, dtype=float))
        n = kappa.shape[0]
        theta = np.asarray(self.theta, dtype=float).reshape(-1)
        c_init = np.asarray(self.c_init, dtype=float).reshape(-1)
        eta = np.asarray(self.eta, dtype=float)
        if eta.ndim < 2:
            eta = eta.reshape(n, -1)
        if kappa.shape != (n, n) or theta.shape != (n,) or c_init.shape != (n,) or eta.shape[0] != n:
            raise ValueError("OU spec shapes are inconsistent")
        if np.any(kappa - np.diag(np.diag(kappa)) != 0):
            raise ValueError("OU kappa must be diagonal")
        if np.any(np.diag(kappa) < 0):
            raise ValueError("OU kappa diagonal entries must be >= 0")
        for name, arr in (("kappa", kappa), ("theta", theta), ("eta", eta), ("c_init", c_init)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"OU {name} has non-finite entries")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def constant(cls, value, driver_dim: int) -> "OUSpec":
        value = np.asarray(value, dtype=float).reshape(-1)
        n = value.size
        return cls(np.zeros((n, n)), np.zeros(n), np.zeros((n, driver_dim)), value)

    def with_driver_dim(self, q: int) -> "OUSpec":
        if self.driver_dim == q:
            return self
        if np.any(self.eta != 0):
            raise ValueError("cannot change the driver dimension of a noisy factor")
        return dataclasses.replace(self, eta=np.zeros((self.dim, q)))

    @property
    def dim(self) -> int:
        return self.theta.size

    @property
    def driver_dim(self) -> int:
        return self.eta.shape[1]

    @property
    def rates(self) -> np.ndarray:
        return np.diag(self.kappa)

    @property
    def is_deterministic(self) -> bool:
        return not np.any(self.eta != 0)

    def decay(self, tau: float) -> np.ndarray:
        return np.exp(-self.rates * tau)

    def mean_path(self, times) -> np.ndarray:
        """E[c_t] started from c_init at time 0, shape (len(times), n)."""
        times = np.asarray(times, dtype=float)
        a = np.exp(-np.outer(times, self.rates))
        return a * self.c_init + (1.0 - a) * self.theta

    def increment_cov(self, h: float) -> np.ndarray:
        """Covariance of (dW_j, I_1j, ..., I_nj) for one driver j over a step h.

        I_ij is the stochastic integral of exp(-kappa_i (t+h-s)) dW_j(s).
        """
        k = self.rates
        n = k.size
        cov = np.empty((n + 1, n + 1))
        cov[0, 0] = h
        cov[0, 1:] = cov[1:, 0] = _expm1_ratio(k, h)
        cov[1:, 1:] = _expm1_ratio(k[:, None] + k[None, :], h)
        return cov


def ou_conditional_mean(spec: OUSpec, c_t, t: float, s: float) -> np.ndarray:
    if s < t:
        raise ValueError("s must be >= t")
    a = spec.decay(s - t)
    return a * np.asarray(c_t, dtype=float) + (1.0 - a) * spec.theta


ou_step = ou_conditional_mean


def ou_conditional_cov(spec: OUSpec, tau: float) -> np.ndarray:
    k = spec.rates
    return (spec.eta @ spec.eta.T) * _expm1_ratio(k[:, None] + k[None, :], tau)


def sample_factor_paths_tm(rng: np.random.Generator, ou: OUSpec, grid: TimeGrid, count: int):
    """Exact joint draw of Brownian increments and the OU path they drive.

    Time-major output: ``dW`` of shape (S, count, q) and ``c`` of shape
    (S+1, count, n).
    """
    n, q, S = ou.dim, ou.driver_dim, grid.S
    root = psd_sqrt(ou.increment_cov(grid.dt))
    z = rng.standard_normal((S, count, q, n + 1))
    dW = z @ root[0]
    c = np.empty((S + 1, count, n))
    c[0] = ou.c_init
    if ou.is_deterministic:
        c[1:] = ou.mean_path(grid.nodes[1:])[:, None, :]
        return dW, c
    # I[..., j, i]: integral of exp(-kappa_i (t_{k+1} - s)) dW_j over the step
    I = z @ root[1:].T
    innov = np.einsum("scji,ij->sci", I, ou.eta)
    a = ou.decay(grid.dt)
    drift = (1.0 - a) * ou.theta
    for k in range(S):
        np.multiply(c[k], a, out=c[k + 1])
        c[k + 1] += drift
        c[k + 1] += innov[k]
    return dW, c


def sample_factor_paths(rng: np.random.Generator, ou: OUSpec, grid: TimeGrid, count: int):
    """Batch-major view of :func:`sample_factor_paths_tm`: (count, S, q), (count, S+1, n)."""
    dW, c = sample_factor_paths_tm(rng, ou, grid, count)
    return np.ascontiguousarray(np.swapaxes(dW, 0, 1)), np.ascontiguousarray(np.swapaxes(c, 0, 1))


def sample_initial(rng: np.random.Generator, mean: np.ndarray, cov: np.ndarray, count: int) -> np.ndarray:
    z = rng.standard_normal((count, mean.size))
    return mean + z @ psd_sqrt(cov).T


def sample_idiosyncratic_tm(rng: np.random.Generator, spec: "ModelSpec", grid: TimeGrid, count: int):
    """Draw time-major (dW, c) and xi for ``count`` agents from one stream."""
    dW, c = sample_factor_paths_tm(rng, spec.idio_factor, grid, count)
    xi = sample_initial(rng, spec.xi_mean, spec.xi_cov, count)
    return dW, c, xi


def sample_idiosyncratic(rng: np.random.Generator, spec: "ModelSpec", grid: TimeGrid, count: int):
    """Batch-major (dW, c, xi) for ``count`` agents from one stream."""
    dW, c, xi = sample_idiosyncratic_tm(rng, spec, grid, count)
    return np.ascontiguousarray(np.swapaxes(dW, 0, 1)), np.ascontiguousarray(np.swapaxes(c, 0, 1)), xi


@dataclass(frozen=True, eq=False)
class ScenarioSet:
    """M common paths, each carrying K conditionally independent copies."""

    grid: TimeGrid
    M: int
    K: int
    master_seed: int
    population: int
    dW0: np.ndarray  # (M, S, d0)
    c0: np.ndarray  # (M, S+1, n)
    dW: np.ndarray  # (M, K, S, d)
    c: np.ndarray  # (M, K, S+1, n)
    xi: np.ndarray  # (M, K, n)

    def __post_init__(self):
        for name in ("dW0", "c0", "dW", "c", "xi"):
            getattr(self, name).setflags(write=False)

    @property
    def W0(self) -> np.ndarray:
        return _cumulative(self.dW0)

    @property
    def W(self) -> np.ndarray:
        return _cumulative(self.dW)

    def same_draws(self, other: "ScenarioSet") -> bool:
        return all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in ("dW0", "c0", "dW", "c", "xi")
        )


def _cumulative(increments: np.ndarray) -> np.ndarray:
    shape = increments.shape[:-2] + (1, increments.shape[-1])
    return np.concatenate([np.zeros(shape), np.cumsum(increments, axis=-2)], axis=-2)


def build_scenarios(
    spec: "ModelSpec",
    grid: TimeGrid,
    M: int,
    K: int,
    master_seed: int,
    *,
    population: int = 0,
    workers: int | None = None,
) -> ScenarioSet:
    """Generate the conditional-copies layout.

    The common stream of path m is keyed (seed, COMMON, m); copy (m, k) is
    keyed (seed, IDIO + p*stride, m, k).  ``workers`` only changes how the
    streams are scheduled, never their content.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    if K < 2:
        raise ValueError("K must be >= 2: conditional means need at least two copies")
    idio_role = ROLE_IDIO + POP_STRIDE * population

    def common(m):
        dW0, c0 = sample_factor_paths(stream(master_seed, ROLE_COMMON, m), spec.common_factor, grid, 1)
        return dW0[0], c0[0]

    def copy(mk):
        m, k = mk
        dW, c, xi = sample_idiosyncratic(stream(master_seed, idio_role, m, k), spec, grid, 1)
        return dW[0], c[0], xi[0]

    cells = [(m, k) for m in range(M) for k in range(K)]
    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            commons = list(pool.map(common, range(M)))
            copies = list(pool.map(copy, cells, chunksize=256))
    else:
        commons = [common(m) for m in range(M)]
        copies = [copy(mk) for mk in cells]

    S = grid.S
    return ScenarioSet(
        grid=grid,
        M=M,
        K=K,
        master_seed=int(master_seed),
        population=population,
        dW0=np.stack([cm[0] for cm in commons]),
        c0=np.stack([cm[1] for cm in commons]),
        dW=np.stack([cp[0] for cp in copies]).reshape(M, K, S, -1),
        c=np.stack([cp[1] for cp in copies]).reshape(M, K, S + 1, -1),
        xi=np.stack([cp[2] for cp in copies]).reshape(M, K, -1),
    )


def coarsen(scenarios: ScenarioSet, factor: int) -> ScenarioSet:
    """Same realisation seen on a grid ``factor`` times coarser."""
    S = scenarios.grid.S
    if factor < 1 or S % factor:
        raise ValueError(f"factor {factor} does not divide S = {S}")

    def block_sum(dw):
        return dw.reshape(dw.shape[:-2] + (S // factor, factor, dw.shape[-1])).sum(axis=-2)

    return ScenarioSet(
        grid=TimeGrid(scenarios.grid.T, S // factor),
        M=scenarios.M,
        K=scenarios.K,
        master_seed=scenarios.master_seed,
        population=scenarios.population,
        dW0=block_sum(scenarios.dW0),
        c0=np.ascontiguousarray(scenarios.c0[:, ::factor]),
        dW=block_sum(scenarios.dW),
        c=np.ascontiguousarray(scenarios.c[:, :, ::factor]),
        xi=scenarios.xi.copy(),
    )


def conditional_mean_estimate(values, axis: int = 0) -> np.ndarray:
    """Average over the copies axis: the estimator of E[. | common noise]."""
    values = np.asarray(values, dtype=float)
    if values.shape[axis] < 2:
        raise ValueError("conditional mean needs at least two copies")
    return values.mean(axis=axis)


def wasserstein_1d(a, b, p: int = 1) -> float:
    """Exact W_p between two empirical measures on the line.

    Integrates |F_a^{-1}(u) - F_b^{-1}(u)|^p over u in (0, 1); with equal
    sizes this is the sorted-sample coupling.
    """
    if p not in (1, 2):
        raise ValueError("p must be 1 or 2")
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample")
    if a.size == b.size:
        return float(np.mean(np.abs(a - b) ** p) ** (1.0 / p))
    u = np.union1d(np.arange(1, a.size + 1) / a.size, np.arange(1, b.size + 1) / b.size)
    u[-1] = 1.0
    width = np.diff(np.concatenate([[0.0], u]))
    ia = np.minimum(np.ceil(u * a.size - 1e-9).astype(int) - 1, a.size - 1)
    ib = np.minimum(np.ceil(u * b.size - 1e-9).astype(int) - 1, b.size - 1)
    return float(np.sum(width * np.abs(a[ia] - b[ib]) ** p) ** (1.0 / p))
