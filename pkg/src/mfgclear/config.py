"""YAML model files.

Single-population layout::

    model:         n, d0, d, T, steps, Lambda, delta, mode (general | futures)
    lq:            K_l, L_c0, L_c, l_const, Q, F_phi, F_c0, F_c, f_const,
                   P, G_c0, G_c, g_const, sigma0, sigma      (omitted = 0)
    psi:           kind (identity | saturating), scale, slope, price_range
    common_factor: kappa, theta, eta, c_init
    idio_factor:   kappa, theta, eta, c_init
    initial_law:   mean, cov

A multi-population file replaces ``lq``, ``idio_factor``, ``initial_law``
and ``model.Lambda`` by a ``populations`` list whose items carry
``weight``, ``Lambda``, ``lq``, ``idio_factor`` and ``initial_law``;
``model.mode`` is then ``short-T`` or ``general-T``.

Matrices are nested lists in row-major order.  A scalar stands for a 1x1
block, or for a multiple of the identity when a square block is expected.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
import yaml

from .model import (
    GENERAL,
    LQCoefficients,
    ModelError,
    ModelSpec,
    PriceMapSpec,
    as_matrix,
    as_vector,
)
from .multipop import GENERAL_T, SHORT_T, MultiPopSpec, PopulationSpec
from .stochastics import OUSpec


class ConfigError(ValueError):
    def __init__(self, message: str, source: str = "<config>", line: int | None = None, key: str | None = None):
        self.line = line
        self.key = key
        loc = source + (f":{line}" if line else "")
        super().__init__(f"{loc}: {key + ': ' if key else ''}{message}")


_MODEL_KEYS = {"n", "d0", "d", "T", "steps", "Lambda", "delta", "mode"}
_LQ_KEYS = {
    "K_l", "L_c0", "L_c", "l_const", "Q", "F_phi", "F_c0", "F_c", "f_const",
    "P", "G_c0", "G_c", "g_const", "sigma0", "sigma",
}  # fmt: skip
_PSI_KEYS = {"kind", "scale", "slope", "price_range"}
_OU_KEYS = {"kappa", "theta", "eta", "c_init"}
_LAW_KEYS = {"mean", "cov"}
_POP_KEYS = {"weight", "Lambda", "lq", "idio_factor", "initial_law"}
_SINGLE_TOP = {"model", "lq", "psi", "common_factor", "idio_factor", "initial_law"}
_MULTI_TOP = {"model", "common_factor", "populations", "psi"}


class _Doc:
    """Parsed YAML plus the source line of every key."""

    def __init__(self, text: str, source: str):
        self.source = source
        try:
            self.data = yaml.safe_load(text)
            root = yaml.compose(text, Loader=yaml.SafeLoader)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            line = mark.line + 1 if mark else None
            raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}", source, line) from None
        if not isinstance(self.data, dict):
            raise ConfigError("top level must be a mapping", source, 1)
        self.lines: dict[tuple, int] = {}
        self._index(root, ())

    def _index(self, node, path):
        self.lines[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                self.lines[path + (k.value,)] = k.start_mark.line + 1
                self._index_children(v, path + (k.value,))
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                self._index(v, path + (i,))

    def _index_children(self, node, path):
        if isinstance(node, (yaml.MappingNode, yaml.SequenceNode)):
            line = self.lines[path]
            self._index(node, path)
            self.lines[path] = line
        else:
            self.lines.setdefault(path, node.start_mark.line + 1)

    def error(self, message: str, path: tuple) -> ConfigError:
        p = tuple(path)
        while p and p not in self.lines:
            p = p[:-1]
        key = ".".join(str(x) for x in path) or None
        return ConfigError(message, self.source, self.lines.get(p), key)


def _section(doc: _Doc, parent: dict, name: str, path: tuple, allowed: set, required: bool = False) -> dict:
    val = parent.get(name)
    if val is None:
        if required:
            raise doc.error("missing section", path + (name,) if path else (name,))
        return {}
    if not isinstance(val, dict):
        raise doc.error("expected a mapping", path + (name,))
    unknown = sorted(set(val) - allowed)
    if unknown:
        raise doc.error(f"unknown key (allowed: {', '.join(sorted(allowed))})", path + (name, unknown[0]))
    return val


def _convert(doc, path, fn, *args):
    try:
        return fn(*args)
    except (ModelError, ValueError, TypeError) as exc:
        raise doc.error(str(exc), path) from None


def _int(doc, sec, key, path, default=None):
    v = sec.get(key, default)
    if v is None:
        raise doc.error("missing required key", path + (key,))
    if isinstance(v, bool) or not isinstance(v, int) or v < 1:
        raise doc.error(f"expected a positive integer, got {v!r}", path + (key,))
    return v


def _float(doc, sec, key, path, default=None):
    v = sec.get(key, default)
    if v is None:
        raise doc.error("missing required key", path + (key,))
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise doc.error(f"expected a number, got {v!r}", path + (key,))
    return float(v)


def _ou(doc, parent, name, path, n, q) -> OUSpec | None:
    sec = _section(doc, parent, name, path, _OU_KEYS)
    if not sec:
        return None
    p = path + (name,)
    kap = np.asarray(sec.get("kappa", 0.0), dtype=float)
    if kap.ndim <= 1:
        kap = np.diag(np.broadcast_to(kap, (n,)).astype(float))
    kappa = _convert(doc, p + ("kappa",), as_matrix, kap, n, n, "kappa")
    theta = _convert(doc, p + ("theta",), as_vector, sec.get("theta", 0.0), n, "theta")
    eta = _convert(doc, p + ("eta",), as_matrix, sec.get("eta", 0.0), n, q, "eta")
    c_init = _convert(doc, p + ("c_init",), as_vector, sec.get("c_init", 0.0), n, "c_init")
    return _convert(doc, p, OUSpec, kappa, theta, eta, c_init)


def _lq(doc, parent, path, n, d0, d) -> LQCoefficients:
    sec = _section(doc, parent, "lq", path, _LQ_KEYS)
    for key, val in sec.items():
        rows, cols = (n, d0) if key == "sigma0" else (n, d) if key == "sigma" else (n, n)
        if key in ("l_const", "f_const", "g_const"):
            _convert(doc, path + ("lq", key), as_vector, val, n, key)
        else:
            _convert(doc, path + ("lq", key), as_matrix, val, rows, cols, key)
    return LQCoefficients.build(n, d0, d, **sec)


def _law(doc, parent, path, n):
    sec = _section(doc, parent, "initial_law", path, _LAW_KEYS)
    p = path + ("initial_law",)
    mean = _convert(doc, p + ("mean",), as_vector, sec.get("mean", 0.0), n, "mean")
    cov = _convert(doc, p + ("cov",), as_matrix, sec.get("cov", 0.0), n, n, "cov")
    return mean, cov


def _psi(doc, data):
    sec = _section(doc, data, "psi", (), _PSI_KEYS)
    if not sec:
        return PriceMapSpec()
    kw = {k: sec[k] for k in ("kind",) if k in sec}
    for k in ("scale", "slope", "price_range"):
        if k in sec:
            kw[k] = _float(doc, sec, k, ("psi",))
    return _convert(doc, ("psi",), PriceMapSpec, *[], **kw) if kw else PriceMapSpec()


def parse_config(text: str, source: str = "<config>", *, steps: int | None = None):
    """Build a ModelSpec, or a MultiPopSpec when a ``populations`` list is present."""
    doc = _Doc(text, source)
    data = doc.data
    multi = "populations" in data
    top = _MULTI_TOP if multi else _SINGLE_TOP
    unknown = sorted(set(data) - top)
    if unknown:
        raise doc.error(f"unknown section (allowed: {', '.join(sorted(top))})", (unknown[0],))
    model = _section(doc, data, "model", (), _MODEL_KEYS, required=True)
    mp = ("model",)
    n = _int(doc, model, "n", mp)
    d0 = _int(doc, model, "d0", mp, 1)
    d = _int(doc, model, "d", mp, 1)
    T = _float(doc, model, "T", mp)
    S = steps if steps is not None else _int(doc, model, "steps", mp)
    delta = _float(doc, model, "delta", mp, 0.0)
    common = _ou(doc, data, "common_factor", (), n, d0)
    psi = _psi(doc, data)

    if not multi:
        if "Lambda" not in model:
            raise doc.error("missing required key", mp + ("Lambda",))
        lam = _convert(doc, mp + ("Lambda",), as_matrix, model["Lambda"], n, n, "Lambda")
        lq = _lq(doc, data, (), n, d0, d)
        mean, cov = _law(doc, data, (), n)
        mode = model.get("mode", GENERAL)
        try:
            return ModelSpec(
                n, d0, d, T, S, lam, delta, lq, psi,
                common_factor=common,
                idio_factor=_ou(doc, data, "idio_factor", (), n, d),
                xi_mean=mean, xi_cov=cov, mode=mode,
            )  # fmt: skip
        except ModelError as exc:
            raise doc.error(str(exc), mp) from None

    if not psi.is_identity:
        raise doc.error("multi-population models use the identity price map", ("psi",))
    pops_raw = data["populations"]
    if not isinstance(pops_raw, list) or not pops_raw:
        raise doc.error("expected a non-empty list", ("populations",))
    pops = []
    for i, item in enumerate(pops_raw):
        path = ("populations", i)
        if not isinstance(item, dict):
            raise doc.error("expected a mapping", path)
        bad = sorted(set(item) - _POP_KEYS)
        if bad:
            raise doc.error(f"unknown key (allowed: {', '.join(sorted(_POP_KEYS))})", path + (bad[0],))
        if "Lambda" not in item:
            raise doc.error("missing required key", path + ("Lambda",))
        lam = _convert(doc, path + ("Lambda",), as_matrix, item["Lambda"], n, n, "Lambda")
        mean, cov = _law(doc, item, path, n)
        pops.append(
            PopulationSpec(
                _float(doc, item, "weight", path),
                lam,
                _lq(doc, item, path, n, d0, d),
                _ou(doc, item, "idio_factor", path, n, d),
                mean,
                cov,
            )
        )
    mode = model.get("mode", SHORT_T)
    if mode not in (SHORT_T, GENERAL_T):
        raise doc.error(f"expected {SHORT_T!r} or {GENERAL_T!r}", mp + ("mode",))
    try:
        return MultiPopSpec(n, d0, d, T, S, delta, tuple(pops), common, mode)
    except ModelError as exc:
        raise doc.error(str(exc), ("populations",)) from None


def load_config(path, *, steps: int | None = None):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read file: {exc.strerror}", str(path)) from None
    return parse_config(text, str(path), steps=steps)


def config_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
