"""CSV tables and the run manifest.

Every table has a fixed column order.  Floats are written with 17
significant digits, which round-trips IEEE doubles exactly, so the same
inputs always give byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__

FLOAT_FMT = "%.17g"
EXCLUDED_FROM_CHECKSUMS = (".png",)


def write_csv(path, columns, rows, int_cols: int = 0) -> Path:
    """Write ``rows`` under ``columns``; the first ``int_cols`` columns are integers."""
    rows = np.asarray(rows, dtype=float).reshape(-1, len(columns))
    fmt = ["%d"] * int_cols + [FLOAT_FMT] * (len(columns) - int_cols)
    path = Path(path)
    np.savetxt(path, rows, fmt=fmt, delimiter=",", header=",".join(columns), comments="")
    return path


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path) as fh:
        cols = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return cols, data


def _labels(prefix: str, n: int) -> list[str]:
    return [f"{prefix}_{i + 1}" for i in range(n)]


def price_table(phi, times, ybars=None):
    """(m, t, phi_1..n[, ybar_p{p}_1..n]) for phi of shape (M, S+1, n)."""
    M, S1, n = phi.shape
    cols = ["m", "t"] + _labels("phi", n)
    blocks = [np.repeat(np.arange(M), S1)[:, None], np.tile(times, M)[:, None], phi.reshape(-1, n)]
    if ybars is not None:
        for p, yb in enumerate(ybars):
            cols += _labels(f"ybar_p{p + 1}", n)
            blocks.append(yb.reshape(-1, n))
    return cols, np.concatenate(blocks, axis=1)


def solution_table(sol):
    """(m, k, t, X_1..n, Y_1..n, alpha_1..n) for every copy and node."""
    M, K, S1, n = sol.X.shape
    idx = np.indices((M, K, S1)).reshape(3, -1).T
    cols = ["m", "k", "t"] + _labels("X", n) + _labels("Y", n) + _labels("alpha", n)
    data = np.concatenate(
        [idx[:, :2], sol.grid.nodes[idx[:, 2]][:, None], sol.X.reshape(-1, n), sol.Y.reshape(-1, n),
         sol.alpha.reshape(-1, n)],
        axis=1,
    )  # fmt: skip
    return cols, data


def paths_table(scenarios):
    """(m, k, t, W0_*, c0_*, W_*, c_*); Brownian paths are cumulated increments."""
    sc = scenarios
    M, K, S1 = sc.M, sc.K, sc.grid.S + 1
    W0 = np.broadcast_to(sc.W0[:, None], (M, K) + sc.W0.shape[1:])
    c0 = np.broadcast_to(sc.c0[:, None], (M, K) + sc.c0.shape[1:])
    idx = np.indices((M, K, S1)).reshape(3, -1).T
    d0, n, d = W0.shape[-1], c0.shape[-1], sc.W.shape[-1]
    cols = ["m", "k", "t"] + _labels("W0", d0) + _labels("c0", n) + _labels("W", d) + _labels("c", n)
    data = np.concatenate(
        [idx[:, :2], sc.grid.nodes[idx[:, 2]][:, None], W0.reshape(-1, d0), c0.reshape(-1, n),
         sc.W.reshape(-1, d), sc.c.reshape(-1, n)],
        axis=1,
    )  # fmt: skip
    return cols, data


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: str
    config_hash: str
    seed: int | None
    grid: dict
    mode: str
    options: dict = field(default_factory=dict)
    version: str = __version__
    python: str = field(default_factory=platform.python_version)
    numpy: str = np.__version__
    checksums: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def add_output(self, path) -> None:
        path = Path(path)
        if path.suffix.lower() not in EXCLUDED_FROM_CHECKSUMS:
            self.checksums[path.name] = sha256_file(path)

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "manifest.json"
        data = asdict(self)
        data["checksums"] = dict(sorted(self.checksums.items()))
        path.write_text(json.dumps(data, indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))
