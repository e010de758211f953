"""JSON readers and writers for models, stage data, run configurations and policies.

Every reader raises :class:`InputError` whose message names the offending
file and field, so command-line failures can be reported on one line.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gaussian import TruncationRegion
from .reformulation import ConstraintGroup, LinearDecisionRule, StageSystem
from .timeseries import ModelError, TimeSeriesModel

__all__ = [
    "InputError",
    "RunConfig",
    "load_json",
    "dump_json",
    "load_model",
    "load_stages",
    "load_config",
    "load_policy",
    "load_scenarios",
    "model_to_dict",
    "stages_to_dict",
    "policy_to_dict",
]


class InputError(ValueError):
    """Bad input file; ``code`` is a short machine-readable tag."""

    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def load_json(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InputError("E_FILE", f"{path}: {exc.strerror or exc}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError("E_PARSE", f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None


def dump_json(obj, path=None):
    """Serialize deterministically (sorted keys, fixed indentation)."""
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


class _Fields:
    """Field access on a parsed JSON object with located error messages."""

    def __init__(self, data, where, code):
        if not isinstance(data, dict):
            raise InputError(code, f"{where}: expected a JSON object")
        self.data, self.where, self.code = data, where, code

    def fail(self, name, msg):
        raise InputError(self.code, f"{self.where}: field '{name}': {msg}")

    def get(self, name, default=...):
        if name not in self.data:
            if default is ...:
                self.fail(name, "missing")
            return default
        return self.data[name]

    def array(self, name, ndim=None, default=...):
        raw = self.get(name, default)
        if raw is default and default is not ...:
            return default
        try:
            arr = np.asarray(raw, dtype=float)
        except (TypeError, ValueError):
            self.fail(name, "expected numbers")
        if ndim is not None and arr.ndim != ndim:
            self.fail(name, f"expected a {ndim}-dimensional array, got {arr.ndim}")
        if not np.all(np.isfinite(arr)):
            self.fail(name, "contains non-finite values")
        return arr

    def number(self, name, default=..., kind=float):
        raw = self.get(name, default)
        if raw is None:
            return None
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            self.fail(name, "expected a number")
        if kind is int and raw != int(raw):
            self.fail(name, "expected an integer")
        return kind(raw)


# ------------------------------------------------------------------ model


def model_to_dict(model: TimeSeriesModel):
    return {
        "alpha": [[a.tolist() for a in row] for row in model.alpha],
        "beta": [[b.tolist() for b in row] for row in model.beta],
        "mu": model.mu.tolist(),
        "sigma": model.sigma.tolist(),
        "xi_hist": model.xi_hist.tolist(),
        "eps_hist": model.eps_hist.tolist(),
    }


def load_model(path) -> TimeSeriesModel:
    """Read a model file with fields ``alpha``, ``beta``, ``mu``, ``sigma`` and optional histories.

    ``alpha[t][m]`` and ``beta[t][m]`` are coefficient lists; ``mu`` is
    ``T x M``; ``sigma`` is ``T x M x M``; ``xi_hist`` and ``eps_hist`` are
    ``M x K`` with the newest value first.
    """
    fs = _Fields(load_json(path), str(path), "E_MODEL")
    ragged = {}
    for name in ("alpha", "beta"):
        raw = fs.get(name)
        if not isinstance(raw, list) or not all(isinstance(r, list) for r in raw):
            fs.fail(name, "expected a list (stages) of lists (components) of coefficient lists")
        try:
            ragged[name] = [[np.asarray(c, dtype=float).reshape(-1) for c in row] for row in raw]
        except (TypeError, ValueError):
            fs.fail(name, "coefficients must be numbers")
    mu = fs.array("mu", 2)
    sigma = fs.array("sigma", 3)
    hist = {}
    for name in ("xi_hist", "eps_hist"):
        h = fs.get(name, None)
        hist[name] = None if h is None or h == [] else fs.array(name)
    try:
        return TimeSeriesModel(ragged["alpha"], ragged["beta"], mu, sigma, **hist)
    except ModelError as exc:
        raise InputError("E_MODEL", f"{path}: {exc}") from None


# ------------------------------------------------------------------ stages


def _group_to_dict(g: ConstraintGroup):
    return {
        "A": [[a.tolist() for a in row] for row in g.A],
        "B": [[b.tolist() for b in row] for row in g.B],
        "b": [v.tolist() for v in g.b],
    }


def stages_to_dict(stage: StageSystem):
    return {
        "n": list(stage.n),
        "M": stage.M,
        "p": stage.p,
        "h": [v.tolist() for v in stage.h],
        "penalty": [v.tolist() for v in stage.penalty],
        "soft": _group_to_dict(stage.soft),
        "prob": _group_to_dict(stage.prob),
        "hard": _group_to_dict(stage.hard),
    }


def _load_group(fs, name, n, M):
    raw = fs.get(name, None)
    if raw is None:
        return ConstraintGroup.empty(n, M)
    sub = _Fields(raw, f"{fs.where}: group '{name}'", fs.code)
    T = len(n)
    b = sub.get("b")
    if not isinstance(b, list) or len(b) != T:
        sub.fail("b", f"expected one right-hand side per stage ({T})")
    rhs = [np.asarray(v, dtype=float).reshape(-1) for v in b]
    out = {}
    for key, width in (("A", None), ("B", M)):
        rows = sub.get(key)
        if not isinstance(rows, list) or len(rows) != T:
            sub.fail(key, f"expected one list of matrices per stage ({T})")
        mats = []
        for t, row in enumerate(rows):
            if not isinstance(row, list) or len(row) != t + 1:
                sub.fail(key, f"stage {t + 1} needs {t + 1} matrices")
            cols = [width if width is not None else n[tau] for tau in range(t + 1)]
            try:
                mats.append([np.asarray(m, dtype=float).reshape(rhs[t].size, c) for m, c in zip(row, cols)])
            except ValueError:
                sub.fail(key, f"stage {t + 1}: matrix shapes must be ({rhs[t].size}, columns)")
        out[key] = mats
    return ConstraintGroup(A=out["A"], B=out["B"], b=rhs)


def load_stages(path) -> StageSystem:
    """Read stage data: ``n``, ``M``, ``h``, ``penalty``, ``p`` and the groups ``soft``, ``prob``, ``hard``.

    A group is ``{"A": [[A_t1, ..., A_tt], ...], "B": [[...], ...], "b": [b_1, ...]}``;
    absent groups are empty.
    """
    fs = _Fields(load_json(path), str(path), "E_STAGE")
    n = fs.get("n")
    if not isinstance(n, list) or not n or not all(isinstance(v, int) and v >= 0 for v in n):
        fs.fail("n", "expected a nonempty list of nonnegative integers")
    M = fs.number("M", kind=int)
    groups = {name: _load_group(fs, name, n, M) for name in ("soft", "prob", "hard")}
    h = fs.get("h")
    pen = fs.get("penalty", None)
    if pen is None:
        pen = [[0.0] * groups["soft"].rows(t) for t in range(len(n))]
    try:
        return StageSystem(n, M, h=h, penalty=pen, p=fs.number("p", 0.9), **groups)
    except (ValueError, TypeError) as exc:
        raise InputError("E_STAGE", f"{path}: {exc}") from None


# ------------------------------------------------------------------ config


@dataclass
class RunConfig:
    model: TimeSeriesModel
    stage: StageSystem
    kind: str
    truncation: TruncationRegion = None
    solver: dict = field(default_factory=dict)
    seed: int = 0
    qmc_points: int = 20_000
    saa_n: int = 20_000
    out: str = None
    source: str = None


KINDS = ("P1", "P2", "P3", "P4", "P_TRUNC")


def load_config(path) -> RunConfig:
    """Read a run configuration; file paths are relative to the config's directory.

    Fields: ``model``, ``stages``, ``kind``, optional ``p`` (overrides the
    stage file), ``truncation`` (``{"kind": "box", "lower", "upper"}`` or
    ``{"kind": "ellipsoid", "center", "shape", "radius"}``), ``solver``
    (``max_iter``, ``kkt_tol``, ``starts``), ``seed``, ``qmc_points``,
    ``saa_n`` and ``out``.
    """
    path = Path(path)
    fs = _Fields(load_json(path), str(path), "E_CONFIG")
    base = path.parent
    for name in ("model", "stages"):
        if not isinstance(fs.get(name), str):
            fs.fail(name, "expected a file path")
        if not (base / fs.get(name)).is_file():
            fs.fail(name, f"file '{fs.get(name)}' does not exist")
    model = load_model(base / fs.get("model"))
    stage = load_stages(base / fs.get("stages"))
    kind = fs.get("kind")
    if kind not in KINDS:
        fs.fail("kind", f"expected one of {', '.join(KINDS)}")
    p = fs.number("p", None)
    if p is not None:
        if not 0.0 <= p < 1.0:
            fs.fail("p", "must lie in [0, 1)")
        stage.p = p
    trunc = None
    raw = fs.get("truncation", None)
    if raw is not None:
        tf = _Fields(raw, f"{path}: truncation", "E_CONFIG")
        tk = tf.get("kind")
        try:
            if tk == "box":
                trunc = TruncationRegion.box(tf.array("lower", 1), tf.array("upper", 1))
            elif tk == "ellipsoid":
                trunc = TruncationRegion.ellipsoid(tf.array("center", 1), tf.array("shape", 2),
                                                   tf.number("radius"))
            else:
                tf.fail("kind", "expected 'box' or 'ellipsoid'")
        except ValueError as exc:
            if isinstance(exc, InputError):
                raise
            raise InputError("E_CONFIG", f"{path}: truncation: {exc}") from None
    if kind == "P_TRUNC" and trunc is None:
        fs.fail("truncation", "required for kind P_TRUNC")
    if model.M != stage.M or model.T != stage.T:
        raise InputError("E_CONFIG", f"{path}: model has T={model.T}, M={model.M} but stage data has "
                                     f"T={stage.T}, M={stage.M}")
    solver = fs.get("solver", {})
    if not isinstance(solver, dict):
        fs.fail("solver", "expected an object")
    unknown = set(solver) - {"max_iter", "kkt_tol", "feas_tol", "starts"}
    if unknown:
        fs.fail("solver", f"unknown options {sorted(unknown)}")
    out = fs.get("out", None)
    return RunConfig(
        model=model, stage=stage, kind=kind, truncation=trunc, solver=dict(solver),
        seed=fs.number("seed", 0, int), qmc_points=fs.number("qmc_points", 20_000, int),
        saa_n=fs.number("saa_n", 20_000, int), out=str(base / out) if out else None, source=str(path),
    )


# ------------------------------------------------------------------ policies


def policy_to_dict(rule: LinearDecisionRule):
    return {"F": [F.tolist() for F in rule.F], "f": [f.tolist() for f in rule.f]}


def load_policy(path, n, M) -> LinearDecisionRule:
    """Read ``{"F": [...], "f": [...]}``, a flat ``{"x": [...]}``, or a solve report."""
    data = load_json(path)
    fs = _Fields(data, str(path), "E_POLICY")
    if "policy" in data:
        fs = _Fields(data["policy"], f"{path}: policy", "E_POLICY")
    if "F" in fs.data:
        f = fs.get("f")
        F = fs.get("F")
        if not isinstance(F, list) or not isinstance(f, list) or len(F) != len(n) or len(f) != len(n):
            fs.fail("F", f"expected {len(n)} stage matrices and offsets")
        try:
            Fs = [np.asarray(Ft, dtype=float).reshape(n[t], M * t) for t, Ft in enumerate(F)]
            fv = [np.asarray(ft, dtype=float).reshape(n[t]) for t, ft in enumerate(f)]
        except ValueError:
            fs.fail("F", "stage t needs an (n_t, M (t-1)) matrix and an n_t offset")
        return LinearDecisionRule(Fs, fv)
    x = fs.array("x", 1)
    if x.size != LinearDecisionRule.size(n, M):
        fs.fail("x", f"expected {LinearDecisionRule.size(n, M)} entries, got {x.size}")
    return LinearDecisionRule.from_vector(x, n, M)


def load_scenarios(path, T, M):
    """Read ``{"xi": [...]}`` of shape ``(N, T, M)``; ``(N, T)`` is accepted when ``M = 1``."""
    fs = _Fields(load_json(path), str(path), "E_SCENARIO")
    xi = fs.array("xi")
    if xi.ndim == 2 and M == 1:
        xi = xi[:, :, None]
    if xi.ndim != 3 or xi.shape[1:] != (T, M):
        fs.fail("xi", f"expected shape (N, {T}, {M}), got {xi.shape}")
    return xi
