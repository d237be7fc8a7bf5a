"""Independent reference computations used by the tests.

Nothing here reuses the package's ODE right-hand sides or step maps.
"""

from __future__ import annotations

import math

import numpy as np


def _cumtrapz(f, h):
    out = np.zeros_like(f)
    out[1:] = np.cumsum(0.5 * h * (f[1:] + f[:-1]), axis=0)
    return out


def _picard_bvp(spec, t0, x0, c00, sub_per_unit, tol=1e-12, damping=0.5, max_iter=20000):
    """Conditional expectations of (xbar, ybar) on [t0, T] given xbar_t0, c0_t0.

    Damped fixed point phi <- -m_y on a trapezoid-discretised two-point
    boundary problem.  Returns m_y(t0).
    """
    lq, T = spec.lq, spec.T
    L = T - t0
    if L <= 0:
        cbT = spec.idio_factor.mean_path([T])[0]
        return (lq.P @ x0 + lq.G_c0 @ c00 + lq.G_c @ cbT + lq.g_const) / (1 - spec.delta)
    steps = max(4, int(math.ceil(L * sub_per_unit)))
    s = np.linspace(t0, T, steps + 1)
    h = L / steps
    ou0 = spec.common_factor
    a = np.exp(-np.outer(s - t0, np.diag(ou0.kappa)))
    mc = a * c00 + (1 - a) * ou0.theta
    cb = spec.idio_factor.mean_path(s)
    phi = np.zeros((steps + 1, spec.n))
    for _ in range(max_iter):
        drift_x = phi @ lq.K_l.T + mc @ lq.L_c0.T + cb @ lq.L_c.T + lq.l_const
        mx = x0 + _cumtrapz(drift_x, h)
        drift_y = mx @ lq.Q.T + phi @ lq.F_phi.T + mc @ lq.F_c0.T + cb @ lq.F_c.T + lq.f_const
        yT = (lq.P @ mx[-1] + lq.G_c0 @ mc[-1] + lq.G_c @ cb[-1] + lq.g_const) / (1 - spec.delta)
        I = _cumtrapz(drift_y, h)
        my = yT + (I[-1] - I)
        new = (1 - damping) * phi - damping * my
        if np.max(np.abs(new - phi)) < tol:
            phi = new
            break
        phi = new
    else:
        raise RuntimeError("oracle Picard iteration did not converge")
    return my[0]


def mean_system_oracle(spec, nodes, sub_per_unit=400):
    """(Abar, beta, beta0) at ``nodes`` by probing the conditional BVP.

    Richardson extrapolation over sub-grid sizes h and h/2 removes the
    leading trapezoid error.
    """
    n = spec.n
    eye = np.eye(n)
    out_Ab = np.empty((len(nodes), n, n))
    out_b = np.empty((len(nodes), n, n))
    out_b0 = np.empty((len(nodes), n))
    for idx, t in enumerate(nodes):

        def probe(x0, c0):
            y1 = _picard_bvp(spec, t, x0, c0, sub_per_unit)
            y2 = _picard_bvp(spec, t, x0, c0, 2 * sub_per_unit)
            return (4 * y2 - y1) / 3

        base = probe(np.zeros(n), np.zeros(n))
        out_b0[idx] = base
        for j in range(n):
            out_Ab[idx][:, j] = probe(eye[j], np.zeros(n)) - base
            out_b[idx][:, j] = probe(np.zeros(n), eye[j]) - base
    return out_Ab, out_b, out_b0


def scalar_riccati_tanh(t, T):
    """A' = A^2 - 1, A_T = 0 solved in closed form: A_t = tanh(T - t)."""
    return np.tanh(T - np.asarray(t))


def wasserstein_bruteforce(a, b, p):
    """Minimum over all pairings (equal sizes, small samples)."""
    import itertools

    a = list(a)
    best = math.inf
    for perm in itertools.permutations(b):
        cost = sum(abs(x - y) ** p for x, y in zip(a, perm)) / len(a)
        best = min(best, cost)
    return best ** (1.0 / p)
