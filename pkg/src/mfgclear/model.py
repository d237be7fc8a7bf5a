"""Model definition, assumption checks and pointwise formulas.

A single-population model is described by a :class:`ModelSpec`.  All matrix
fields are stored as read-only float arrays so a spec can be shared freely
between threads.  Scalars are accepted wherever a 1x1 block is expected.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .stochastics import OUSpec, TimeGrid

PSD_TOL = 1e-12

GENERAL = "general"
FUTURES = "futures"
MODES = (GENERAL, FUTURES)

SOLVABLE = "solvable-general-T"
SHORT_T = "short-T-only"


class ModelError(ValueError):
    """A model is structurally malformed."""


class AssumptionError(ModelError):
    """A hard standing assumption fails (the model is unusable)."""


def _frozen(a) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.setflags(write=False)
    return out


def as_matrix(value, rows: int, cols: int, name: str) -> np.ndarray:
    """Coerce ``value`` to a read-only ``rows x cols`` array.

    A bare scalar is accepted for a 1x1 block, and a scalar ``0`` is accepted
    for any shape (the zero block).
    """
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        if rows == cols == 1 or arr == 0.0:
            arr = np.full((rows, cols), float(arr))
        elif rows == cols:
            arr = float(arr) * np.eye(rows)
        else:
            raise ModelError(f"{name}: expected a {rows}x{cols} matrix, got a scalar")
    if arr.shape != (rows, cols):
        raise ModelError(f"{name}: expected shape ({rows}, {cols}), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ModelError(f"{name}: non-finite entries")
    return _frozen(arr)


def as_vector(value, size: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = np.full(size, float(arr))
    if arr.shape != (size,):
        raise ModelError(f"{name}: expected length {size}, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ModelError(f"{name}: non-finite entries")
    return _frozen(arr)


def sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def min_eig(a: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(sym(a))[0])


# ---------------------------------------------------------------- price map


@dataclass(frozen=True)
class PriceMapSpec:
    """Monotone map psi applied to the price inside the coefficients.

    ``identity``: psi(p) = p.  ``saturating``: psi(p) = a tanh(b p / a), odd,
    increasing, with derivative in (0, b].  ``price_range`` is the bound
    Phi_max used for the range-local slope lower bound.
    """

    kind: str = "identity"
    scale: float = 1.0
    slope: float = 1.0
    price_range: float = 10.0

    def __post_init__(self):
        if self.kind not in ("identity", "saturating"):
            raise ModelError(f"psi.kind must be 'identity' or 'saturating', got {self.kind!r}")
        if self.kind == "saturating":
            if not (self.scale > 0 and self.slope > 0 and self.price_range > 0):
                raise ModelError("saturating psi needs scale, slope and price_range > 0")

    @property
    def is_identity(self) -> bool:
        return self.kind == "identity"

    def __call__(self, phi):
        phi = np.asarray(phi, dtype=float)
        if self.is_identity:
            return phi
        return self.scale * np.tanh(self.slope * phi / self.scale)

    def derivative(self, phi):
        phi = np.asarray(phi, dtype=float)
        if self.is_identity:
            return np.ones_like(phi)
        return self.slope / np.cosh(self.slope * phi / self.scale) ** 2

    @property
    def lipschitz(self) -> float:
        return 1.0 if self.is_identity else self.slope

    @property
    def slope_lower_bound(self) -> float:
        """Smallest derivative on [-price_range, price_range]."""
        if self.is_identity:
            return 1.0
        return float(self.derivative(self.price_range))


# ---------------------------------------------------------------- LQ blocks

_LQ_MATRICES = ("K_l", "L_c0", "L_c", "Q", "F_phi", "F_c0", "F_c", "P", "G_c0", "G_c")
_LQ_VECTORS = ("l_const", "f_const", "g_const")


@dataclass(frozen=True)
class LQCoefficients:
    """Affine coefficient blocks.

    OTC flow:          l  = K_l psi(phi) + L_c0 c0 + L_c c + l_const
    running marginal:  df = Q x + F_phi psi(phi) + F_c0 c0 + F_c c + f_const
    terminal marginal: dg = P x + G_c0 c0 + G_c c + g_const
    """

    K_l: np.ndarray
    L_c0: np.ndarray
    L_c: np.ndarray
    l_const: np.ndarray
    Q: np.ndarray
    F_phi: np.ndarray
    F_c0: np.ndarray
    F_c: np.ndarray
    f_const: np.ndarray
    P: np.ndarray
    G_c0: np.ndarray
    G_c: np.ndarray
    g_const: np.ndarray
    sigma0: np.ndarray
    sigma: np.ndarray

    @classmethod
    def build(cls, n: int, d0: int, d: int, **blocks) -> "LQCoefficients":
        """Build from keyword blocks; omitted blocks default to zero."""
        unknown = set(blocks) - set(_LQ_MATRICES) - set(_LQ_VECTORS) - {"sigma0", "sigma"}
        if unknown:
            raise ModelError(f"unknown LQ blocks: {sorted(unknown)}")
        vals = {}
        for name in _LQ_MATRICES:
            vals[name] = as_matrix(blocks.get(name, 0.0), n, n, name)
        for name in _LQ_VECTORS:
            vals[name] = as_vector(blocks.get(name, 0.0), n, name)
        vals["sigma0"] = as_matrix(blocks.get("sigma0", 0.0), n, d0, "sigma0")
        vals["sigma"] = as_matrix(blocks.get("sigma", 0.0), n, d, "sigma")
        return cls(**vals)

    def replace(self, **changes) -> "LQCoefficients":
        n = self.Q.shape[0]
        d0, d = self.sigma0.shape[1], self.sigma.shape[1]
        current = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        current.update(changes)
        return LQCoefficients.build(n, d0, d, **current)


# ---------------------------------------------------------------- model


@dataclass(frozen=True)
class ModelSpec:
    n: int
    d0: int
    d: int
    T: float
    S: int
    Lambda: np.ndarray
    delta: float
    lq: LQCoefficients
    psi: PriceMapSpec = field(default_factory=PriceMapSpec)
    common_factor: OUSpec | None = None
    idio_factor: OUSpec | None = None
    xi_mean: np.ndarray | None = None
    xi_cov: np.ndarray | None = None
    mode: str = GENERAL

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        for name in ("n", "d0", "d", "S"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ModelError(f"{name} must be a positive integer, got {v!r}")
            set_(name, int(v))
        n, d0, d = self.n, self.d0, self.d
        if not (self.T > 0 and math.isfinite(self.T)):
            raise ModelError(f"T must be positive, got {self.T!r}")
        set_("T", float(self.T))
        if not (0.0 <= self.delta < 1.0):
            raise ModelError(f"delta must lie in [0, 1), got {self.delta!r}")
        set_("delta", float(self.delta))
        set_("Lambda", as_matrix(self.Lambda, n, n, "Lambda"))
        if self.mode not in MODES:
            raise ModelError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lq.Q.shape != (n, n) or self.lq.sigma0.shape != (n, d0) or self.lq.sigma.shape != (n, d):
            raise ModelError("lq block shapes do not match (n, d0, d)")
        if not self.psi.is_identity and n != 1:
            raise ModelError("saturating psi is only supported for n = 1")
        zero_ou = OUSpec.constant(np.zeros(n), 1)
        common = self.common_factor or OUSpec.constant(np.zeros(n), d0)
        idio = self.idio_factor or zero_ou.with_driver_dim(d)
        if common.dim != n or common.driver_dim != d0:
            raise ModelError(f"common_factor must be {n}-dimensional driven by {d0} factors")
        if idio.dim != n or idio.driver_dim != d:
            raise ModelError(f"idio_factor must be {n}-dimensional driven by {d} factors")
        set_("common_factor", common)
        set_("idio_factor", idio)
        set_("xi_mean", as_vector(0.0 if self.xi_mean is None else self.xi_mean, n, "xi_mean"))
        cov = as_matrix(0.0 if self.xi_cov is None else self.xi_cov, n, n, "xi_cov")
        if not np.allclose(cov, cov.T, atol=PSD_TOL, rtol=0):
            raise ModelError("xi_cov must be symmetric")
        if min_eig(cov) < -PSD_TOL:
            raise ModelError("xi_cov must be positive semidefinite")
        set_("xi_cov", cov)
        if self.mode == FUTURES:
            lq = self.lq
            if self.delta != 0.0:
                raise ModelError("futures mode requires delta = 0")
            if np.any(lq.P != 0) or np.any(lq.G_c != 0) or np.any(lq.g_const != 0):
                raise ModelError("futures mode requires P = 0, G_c = 0, g_const = 0")
            if not np.array_equal(lq.G_c0, -np.eye(n)):
                raise ModelError("futures mode requires G_c0 = -I")

    # -- derived quantities
    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.T, self.S)

    @property
    def Lambda_inv(self) -> np.ndarray:
        try:
            return np.linalg.inv(self.Lambda)
        except np.linalg.LinAlgError as exc:
            raise ModelError("Lambda is singular") from exc

    @property
    def has_common_noise(self) -> bool:
        return bool(np.any(self.lq.sigma0 != 0) or np.any(self.common_factor.eta != 0))

    def replace(self, **changes) -> "ModelSpec":
        return dataclasses.replace(self, **changes)

    def with_lq(self, **blocks) -> "ModelSpec":
        return self.replace(lq=self.lq.replace(**blocks))

    def to_dict(self) -> dict:
        def conv(v):
            if isinstance(v, np.ndarray):
                return v.tolist()
            if dataclasses.is_dataclass(v):
                return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
            return v

        return conv(self)

    def fingerprint(self) -> str:
        """Stable sha256 of every field (floats rendered with repr)."""
        payload = json.dumps(self.to_dict(), sort_keys=True, default=repr)
        return hashlib.sha256(payload.encode()).hexdigest()

    # -- pointwise coefficient maps (vectorised over leading axes)
    def otc_flow(self, phi, c0, c):
        lq = self.lq
        return self.psi(phi) @ lq.K_l.T + c0 @ lq.L_c0.T + c @ lq.L_c.T + lq.l_const

    def running_marginal(self, x, phi, c0, c):
        lq = self.lq
        return x @ lq.Q.T + self.psi(phi) @ lq.F_phi.T + c0 @ lq.F_c0.T + c @ lq.F_c.T + lq.f_const

    def terminal_marginal(self, x, c0, c):
        lq = self.lq
        return x @ lq.P.T + c0 @ lq.G_c0.T + c @ lq.G_c.T + lq.g_const


# ---------------------------------------------------------------- validation


@dataclass(frozen=True)
class ValidationReport:
    mode: str
    lambda_min: float
    lambda_max: float
    gamma_l: float
    gamma_f: float
    gamma_g: float
    L_phi: float
    monotone_gap: float
    gamma: float
    flags: dict
    verdict: str
    range_local: bool
    warnings: tuple = ()

    @property
    def solvable(self) -> bool:
        return self.verdict == SOLVABLE

    def lines(self) -> list[str]:
        tag = "MFG-c2" if self.mode == FUTURES else "MFG-c1"
        out = [
            f"lambda_min = {self.lambda_min:.12g}",
            f"lambda_max = {self.lambda_max:.12g}",
            f"gamma_l = {self.gamma_l:.12g}",
            f"gamma_f = {self.gamma_f:.12g}",
            f"gamma_g = {self.gamma_g:.12g}",
            f"L_phi = {self.L_phi:.12g}",
            f"{tag}: gamma = {self.gamma:.12g}",
        ]
        out += [f"{k}: {'pass' if v else 'FAIL'}" for k, v in self.flags.items()]
        if self.range_local:
            out.append("note: range-local monotonicity (saturating psi)")
        out += [f"warning: {w}" for w in self.warnings]
        out.append(f"verdict: {self.verdict}")
        return out


def validate_model(spec: ModelSpec) -> ValidationReport:
    """Evaluate the standing assumptions and the monotonicity constant.

    Raises :class:`AssumptionError` when Lambda is not symmetric positive
    definite.  A non-positive gamma is reported, not raised.
    """
    lam = spec.Lambda
    if not np.allclose(lam, lam.T, atol=PSD_TOL, rtol=0):
        raise AssumptionError("Lambda is not symmetric")
    eig = np.linalg.eigvalsh(sym(lam))
    if eig[0] <= PSD_TOL:
        raise AssumptionError(f"Lambda is not positive definite (smallest eigenvalue {eig[0]:.6g})")

    lq = spec.lq
    gamma_l = min_eig(lq.K_l) * spec.psi.slope_lower_bound
    gamma_f = min_eig(lq.Q)
    gamma_g = min_eig(lq.P)
    L_phi = float(np.linalg.norm(lq.F_phi, 2)) * spec.psi.lipschitz
    if gamma_l > 0:
        gap = gamma_f - L_phi**2 / (4.0 * gamma_l)
    else:
        gap = -math.inf
    gamma = gap if spec.mode == FUTURES else min(gap, gamma_g)

    symmetric = lambda a: np.allclose(a, a.T, atol=PSD_TOL, rtol=0)  # noqa: E731
    flags = {
        "MFG-a(i) Lambda SPD": True,
        "MFG-a(iv) Q PSD": symmetric(lq.Q) and gamma_f >= -PSD_TOL,
        "MFG-a(iv) P PSD": symmetric(lq.P) and gamma_g >= -PSD_TOL,
        "MFG-a(vi) delta < 1": spec.delta < 1.0,
        "MFG-b Lipschitz": True,
        "MFG-c(i) diffusions price-free": True,
        "MFG-c(ii) monotone OTC flow": gamma_l > 0,
        "MFG-c(iii) gamma > 0": gamma > 0,
    }
    warnings = []
    if not all(flags.values()):
        failed = [k for k, v in flags.items() if not v]
        warnings.append("failed checks: " + ", ".join(failed) + "; only a short horizon is covered")
    verdict = SOLVABLE if all(flags.values()) else SHORT_T
    return ValidationReport(
        mode=spec.mode,
        lambda_min=float(eig[0]),
        lambda_max=float(eig[-1]),
        gamma_l=gamma_l,
        gamma_f=gamma_f,
        gamma_g=gamma_g,
        L_phi=L_phi,
        monotone_gap=gap,
        gamma=gamma,
        flags=flags,
        verdict=verdict,
        range_local=not spec.psi.is_identity,
        warnings=tuple(warnings),
    )


# ---------------------------------------------------------------- formulas


def hamiltonian_minimizer(y, phi, Lambda) -> np.ndarray:
    """Optimal trading rate -Lambda^{-1}(y + phi), vectorised over leading axes."""
    Lambda = np.atleast_2d(np.asarray(Lambda, dtype=float))
    try:
        inv = np.linalg.inv(Lambda)
    except np.linalg.LinAlgError as exc:
        raise ModelError("Lambda is singular") from exc
    v = np.asarray(y, dtype=float) + np.asarray(phi, dtype=float)
    return -(v @ inv.T)


def equilibrium_price(ybar) -> np.ndarray:
    return -np.asarray(ybar, dtype=float)


def terminal_condition(x_T, c0_T, c_T, cond_mean_dg, spec: ModelSpec) -> np.ndarray:
    """Terminal adjoint value delta/(1-delta) E[dg | common] + dg(x_T, c0_T, c_T)."""
    if not spec.delta < 1.0:
        raise ModelError("delta must be < 1")
    w = spec.delta / (1.0 - spec.delta)
    return w * np.asarray(cond_mean_dg, dtype=float) + spec.terminal_marginal(
        np.asarray(x_T, dtype=float), np.asarray(c0_T, dtype=float), np.asarray(c_T, dtype=float)
    )


def epsilon_n(n: int, N: float) -> float:
    """Clearing-rate bound N^(-2/max(n,4)) (1 + log N when n == 4)."""
    if N < 1:
        raise ValueError("N must be >= 1")
    rate = N ** (-2.0 / max(n, 4))
    if n == 4:
        rate *= 1.0 + math.log(N)
    return float(rate)
