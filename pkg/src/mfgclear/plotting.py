"""Figures written next to the CSV tables.

Figures are built on bare ``Figure`` objects, so nothing touches pyplot's
global state and rendering is safe from worker threads.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib as mpl
import numpy as np
from matplotlib.figure import Figure

GOLDEN = (np.sqrt(5) - 1) / 2
WIDTH = 5.0
STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "axes.linewidth": 0.6,
    "lines.linewidth": 1.0,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}
MAX_PATHS = 20


def _figure(ncols: int = 1):
    with mpl.rc_context(STYLE):
        fig = Figure(figsize=(WIDTH * ncols, WIDTH * GOLDEN), layout="constrained")
        axes = fig.subplots(1, ncols, squeeze=False)[0]
    return fig, axes


def _save(fig: Figure, path) -> Path:
    with mpl.rc_context(STYLE):
        fig.savefig(path)
    return Path(path)


def plot_price(path, times, phi, c0=None, ybars=None) -> Path:
    """Price paths phi_t per common path, first component of each security."""
    n = phi.shape[-1]
    fig, axes = _figure(n)
    for i, ax in enumerate(axes):
        for m in range(min(phi.shape[0], MAX_PATHS)):
            ax.plot(times, phi[m, :, i], color="C0", alpha=0.35, lw=0.7)
        ax.plot(times, phi[..., i].mean(axis=0), color="C0", lw=1.6, label="mean price")
        if c0 is not None:
            ax.plot(times, c0[..., i].mean(axis=0), color="C3", ls="--", label="mean $c^0$")
        if ybars is not None:
            for p, yb in enumerate(ybars):
                ax.plot(times, -yb[..., i].mean(axis=0), ls=":", label=f"$-\\bar y^{{{p + 1}}}$")
        ax.set_xlabel("$t$")
        ax.set_ylabel(f"$\\varphi_{{{i + 1}}}$")
        ax.legend(frameon=False)
    return _save(fig, path)


def plot_residuals(path, residuals) -> Path:
    fig, (ax,) = _figure()
    it = np.arange(1, len(residuals) + 1)
    ax.semilogy(it, np.maximum(residuals, np.finfo(float).tiny), marker="o", ms=2)
    ax.set_xlabel("iteration")
    ax.set_ylabel("sup-norm price update")
    return _save(fig, path)


def plot_clearing(path, report) -> Path:
    """Net-flow metric against N with its fitted rate and the reference bound."""
    N, metric = report.N.astype(float), report.metric
    se = np.array([r.stderr for r in report.rows])
    eps = np.array([r.epsilon_N for r in report.rows])
    fig, (ax,) = _figure()
    ax.errorbar(N, metric, yerr=2 * se, fmt="o", ms=3, capsize=2, label="net-flow metric")
    if np.isfinite(report.slope):
        fit = metric[0] * (N / N[0]) ** report.slope
        ax.plot(N, fit, color="C1", label=f"fit, slope {report.slope:.3f}")
    bound = report.rows[0].C_hat * report.gamma_hat**2 * eps
    ax.plot(N, bound, color="C2", ls="--", label=r"$\hat C\,\hat\Gamma^2\,\varepsilon_N$")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("$N$")
    ax.set_ylabel(r"$E\int_0^T |N^{-1}\sum_i \alpha^i_t|^2\,dt$")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_wasserstein(path, reports) -> Path:
    N = np.array([r.N for r in reports], dtype=float)
    fig, (ax,) = _figure()
    ax.loglog(N, [r.sup_mean_w2_sq for r in reports], marker="o", ms=3, label=r"$\sup_t E[W_2^2]$")
    ax.loglog(N, [float(np.max(r.W1.mean(axis=0))) for r in reports], marker="s", ms=3, label=r"$\sup_t E[W_1]$")
    ax.set_xlabel("$N$")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_riccati(path, columns, rows) -> Path:
    """One panel per coefficient family (A, Abar, beta, beta0)."""
    families = [f for f in ("A_", "Abar_", "beta_", "beta0_") if any(c.startswith(f) for c in columns)]
    fig, axes = _figure(len(families))
    t = rows[:, 0]
    for ax, fam in zip(axes, families):
        for j, c in enumerate(columns):
            if c.startswith(fam):
                ax.plot(t, rows[:, j], label=c)
        ax.set_xlabel("$t$")
        ax.set_title(fam.rstrip("_"))
        if sum(c.startswith(fam) for c in columns) <= 8:
            ax.legend(frameon=False)
    return _save(fig, path)
