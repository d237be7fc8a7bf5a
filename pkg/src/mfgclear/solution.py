"""Container for a solved equilibrium (shared by the LQ and nonlinear solvers)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import hamiltonian_minimizer
from .stochastics import TimeGrid


@dataclass(frozen=True, eq=False)
class EquilibriumSolution:
    """Price path per common scenario plus per-copy state, adjoint and control.

    Shapes: ``phi``, ``xbar``, ``ybar``, ``c0`` are (M, S+1, n); ``X``, ``Y``,
    ``alpha`` are (M, K, S+1, n).  ``phi`` is the mean-field price -ybar and
    ``alpha`` the mean-field control -Lambda^{-1}(Y + phi).  The finite-K
    market-clearing price is available from :meth:`in_sample_price`.
    """

    grid: TimeGrid
    mode: str
    phi: np.ndarray
    xbar: np.ndarray
    ybar: np.ndarray
    c0: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    alpha: np.ndarray
    Lambda: np.ndarray
    spec_hash: str
    master_seed: int | None
    diagnostics: dict = field(default_factory=dict)
    residual_history: tuple = ()
    affine: object = None

    def __post_init__(self):
        for name in ("phi", "xbar", "ybar", "c0", "X", "Y", "alpha"):
            getattr(self, name).setflags(write=False)

    @property
    def M(self) -> int:
        return self.phi.shape[0]

    @property
    def K(self) -> int:
        return self.X.shape[1]

    @property
    def n(self) -> int:
        return self.phi.shape[-1]

    def in_sample_price(self) -> np.ndarray:
        """Price that clears the K copies exactly: minus the copy average of Y."""
        return -self.Y.mean(axis=1)

    def in_sample_alpha(self) -> np.ndarray:
        return hamiltonian_minimizer(self.Y, self.in_sample_price()[:, None], self.Lambda)

    def in_sample_clearing_residual(self) -> float:
        """max over paths and nodes of |copy average of the in-sample control|."""
        return float(np.max(np.abs(self.in_sample_alpha().mean(axis=1))))

    def mean_field_residual(self) -> float:
        """max |phi + ybar|: zero for an exact solve, <= tol for an iterated one."""
        return float(np.max(np.abs(self.phi + self.ybar)))
