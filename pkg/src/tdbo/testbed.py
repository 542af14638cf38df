"""Time-dependent synthetic payoffs, noisy observations and horizon extrema.

Every payoff has the form ``f(x, t) = f_x(x) + f_xt(x, t)``.  The 1-d
quadratic family uses ``f_x = -4 (x - 0.5)^2`` with four context terms.  The
higher-dimensional cases negate standard minimization benchmarks for
``f_x`` and reuse the Quadratic-d context term on the first coordinate,
rescaled to ``[0, 1]``.

Tabular oracles are read from CSV and served through a reference GP fitted
once on the whole table.
"""

from __future__ import annotations

import csv
import functools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize
from scipy.stats import qmc

from .gp import Dataset, PosteriorModel, build_model, fit_hyperparameters
from .optimizer import BoxDomain

log = logging.getLogger(__name__)

SYNTHETIC = "synthetic"
TABULAR = "tabular"

NOISE_FRACTION = 0.01
NOISE_PROBE = 10_000
PROBE_SEED = 0
GRID_POINTS = 2001
QMC_POINTS = 100_000


class TableParseError(ValueError):
    pass


@dataclass(frozen=True)
class OracleSpec:
    name: str
    dim_d: int
    domain: BoxDomain
    time_range: tuple[float, float]
    noise_stddev: float
    kind: str = SYNTHETIC
    source: str = ""
    reference: PosteriorModel | None = field(default=None, compare=False, repr=False)
    table: Dataset | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in (SYNTHETIC, TABULAR):
            raise ValueError(f"unknown oracle kind {self.kind!r}")
        if self.domain.dim != self.dim_d:
            raise ValueError("domain dimension does not match dim_d")
        if not self.noise_stddev >= 0:
            raise ValueError("noise stddev must be non-negative")
        t0, t1 = self.time_range
        if not t0 < t1:
            raise ValueError(f"empty time range {self.time_range}")
        if self.kind == TABULAR and self.reference is None:
            raise ValueError("a tabular oracle needs its reference model")

    def with_noise(self, noise_stddev: float) -> "OracleSpec":
        return OracleSpec(
            self.name, self.dim_d, self.domain, self.time_range, float(noise_stddev),
            self.kind, self.source, self.reference, self.table,
        )


# ---------------------------------------------------------------------------
# action parts, all vectorized over rows of X

def _quadratic(X):
    return -4.0 * (X[:, 0] - 0.5) ** 2


def _griewank(X):
    i = np.arange(1, X.shape[1] + 1)
    val = 1.0 + np.sum(X**2, axis=1) / 4000.0 - np.prod(np.cos(X / np.sqrt(i)), axis=1)
    return -val


_H3_ALPHA = np.array([1.0, 1.2, 3.0, 3.2])
_H3_A = np.array([[3.0, 10, 30], [0.1, 10, 35], [3.0, 10, 30], [0.1, 10, 35]])
_H3_P = 1e-4 * np.array([[3689, 1170, 2673], [4699, 4387, 7470], [1091, 8732, 5547], [381, 5743, 8828]])

_H6_ALPHA = _H3_ALPHA
_H6_A = np.array([
    [10, 3, 17, 3.5, 1.7, 8],
    [0.05, 10, 17, 0.1, 8, 14],
    [3, 3.5, 1.7, 10, 17, 8],
    [17, 8, 0.05, 10, 0.1, 14],
])
_H6_P = 1e-4 * np.array([
    [1312, 1696, 5569, 124, 8283, 5886],
    [2329, 4135, 8307, 3736, 1004, 9991],
    [2348, 1451, 3522, 2883, 3047, 6650],
    [4047, 8828, 8732, 5743, 1091, 381],
])


def _hartmann(alpha, A, P):
    def f(X):
        r = np.sum(A[None, :, :] * (X[:, None, :] - P[None, :, :]) ** 2, axis=2)
        return np.exp(-r) @ alpha

    return f


def _levy(X):
    w = 1.0 + (X - 1.0) / 4.0
    head = np.sin(np.pi * w[:, 0]) ** 2
    mid = np.sum((w[:, :-1] - 1.0) ** 2 * (1.0 + 10.0 * np.sin(np.pi * w[:, :-1] + 1.0) ** 2), axis=1)
    tail = (w[:, -1] - 1.0) ** 2 * (1.0 + np.sin(2.0 * np.pi * w[:, -1]) ** 2)
    return -(head + mid + tail)


def _styblinski_tang(X):
    return -0.5 * np.sum(X**4 - 16.0 * X**2 + 5.0 * X, axis=1)


# context parts take the first coordinate already mapped to [0, 1]

def _ctx_a(u, t):
    return np.sin(np.pi * (u + t)) + np.cos(np.pi * (u + t))


def _ctx_b(u, t):
    return np.sin(np.pi * u * t) + np.cos(np.pi * u * t)


def _ctx_c(u, t):
    s = u * np.maximum(t - 3.0, 0.0)
    return np.sin(np.pi * s) + np.cos(np.pi * s)


def _ctx_d(u, t):
    return 2.0 * u * np.sin(t) - np.sin(t) ** 2


@dataclass(frozen=True)
class _Case:
    dim: int
    lower: float
    upper: float
    f_x: object
    f_xt: object
    maximizer: tuple[float, ...]


CASES: dict[str, _Case] = {
    "quad-a": _Case(1, 0.0, 1.0, _quadratic, _ctx_a, (0.5,)),
    "quad-b": _Case(1, 0.0, 1.0, _quadratic, _ctx_b, (0.5,)),
    "quad-c": _Case(1, 0.0, 1.0, _quadratic, _ctx_c, (0.5,)),
    "quad-d": _Case(1, 0.0, 1.0, _quadratic, _ctx_d, (0.5,)),
    "griewank": _Case(2, -5.0, 5.0, _griewank, _ctx_d, (0.0, 0.0)),
    "hartmann3": _Case(3, 0.0, 1.0, _hartmann(_H3_ALPHA, _H3_A, _H3_P), _ctx_d, (0.11, 0.56, 0.85)),
    "hartmann6": _Case(6, 0.0, 1.0, _hartmann(_H6_ALPHA, _H6_A, _H6_P), _ctx_d, (0.20, 0.15, 0.48, 0.28, 0.31, 0.66)),
    "levy8": _Case(8, -10.0, 10.0, _levy, _ctx_d, (1.0,) * 8),
    "styblinski-tang10": _Case(10, -5.0, 5.0, _styblinski_tang, _ctx_d, (-2.903534,) * 10),
}
TIME_RANGE = (0.0, 4.0)


def synthetic_oracle(name: str, noise_stddev: float | None = None) -> OracleSpec:
    """Named synthetic oracle; the noise defaults to 1% of the payoff range."""
    key = name.lower()
    if key not in CASES:
        raise ValueError(f"unknown test case {name!r}; expected one of {sorted(CASES)}")
    case = CASES[key]
    domain = BoxDomain.cube(case.lower, case.upper, case.dim)
    spec = OracleSpec(key, case.dim, domain, TIME_RANGE, 0.0)
    if noise_stddev is None:
        noise_stddev = default_noise_stddev(spec)
    return spec.with_noise(noise_stddev)


def default_noise_stddev(spec: OracleSpec) -> float:
    rng = np.random.default_rng(PROBE_SEED)
    X = spec.domain.sample_uniform(rng, NOISE_PROBE)
    t = rng.uniform(*spec.time_range, NOISE_PROBE)
    f = payoff(spec, X, t)
    return float(NOISE_FRACTION * (f.max() - f.min()))


def payoff(spec: OracleSpec, X, t) -> np.ndarray:
    """Noise-free payoff for rows of ``X`` at times ``t`` (scalar or per row)."""
    X = np.asarray(X, dtype=float).reshape(-1, spec.dim_d)
    t = np.broadcast_to(np.asarray(t, dtype=float), (X.shape[0],))
    if spec.kind == TABULAR:
        return spec.reference.predict(X, t)[0]
    case = CASES[spec.name]
    u = (X[:, 0] - spec.domain.lower[0]) / (spec.domain.upper[0] - spec.domain.lower[0])
    return case.f_x(X) + case.f_xt(u, t)


def _check_point(spec: OracleSpec, x, t) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.size != spec.dim_d:
        raise ValueError(f"{spec.name} takes {spec.dim_d}-dimensional actions, got {x.size}")
    if not spec.domain.contains(x, tol=1e-12):
        raise ValueError(f"action {x} lies outside the domain of {spec.name}")
    t0, t1 = spec.time_range
    slack = 1e-12 * (t1 - t0)
    if not t0 - slack <= t <= t1 + slack:
        raise ValueError(f"time {t} lies outside [{t0}, {t1}]")
    return x


def eval_oracle(spec: OracleSpec, x, t: float) -> float:
    x = _check_point(spec, x, t)
    return float(payoff(spec, x[None, :], t)[0])


def observe(spec: OracleSpec, x, t: float, rng) -> float:
    """Noisy observation ``f(x, t) + sigma * N(0, 1)``.

    Tabular oracles return the recorded value when the query hits a table
    row.
    """
    x = _check_point(spec, x, t)
    rng = np.random.default_rng(rng)
    draw = rng.standard_normal()
    if spec.kind == TABULAR:
        hit = _table_row(spec, x, t)
        if hit is not None:
            return hit
    return float(payoff(spec, x[None, :], t)[0] + spec.noise_stddev * draw)


def _table_row(spec: OracleSpec, x, t, rtol: float = 1e-9):
    tab = spec.table
    scale = np.append(spec.domain.width, spec.time_range[1] - spec.time_range[0])
    gap = np.abs(np.column_stack([tab.X, tab.t]) - np.append(x, t)) / scale
    near = np.flatnonzero(np.all(gap <= rtol, axis=1))
    return float(tab.y[near[0]]) if near.size else None


# ---------------------------------------------------------------------------
# extrema at the horizon

def extrema_at_horizon(spec: OracleSpec, T: float) -> tuple[float, float]:
    """Noise-free ``(max, min)`` of ``f(., T)`` over the domain."""
    return _extrema(spec, float(T))


@functools.lru_cache(maxsize=64)
def _extrema(spec: OracleSpec, T: float) -> tuple[float, float]:
    d = spec.dim_d
    if d <= 2:
        axes = [np.linspace(lo, hi, GRID_POINTS) for lo, hi in zip(spec.domain.lower, spec.domain.upper)]
        if d == 1:
            cand = axes[0][:, None]
        else:
            g0, g1 = np.meshgrid(*axes, indexing="ij")
            cand = np.column_stack([g0.ravel(), g1.ravel()])
    else:
        m = int(math.ceil(math.log2(QMC_POINTS)))
        U = qmc.Sobol(d, scramble=True, seed=PROBE_SEED).random_base2(m)
        cand = spec.domain.from_unit(U)
    vals = np.concatenate([payoff(spec, c, T) for c in np.array_split(cand, max(1, cand.shape[0] // 50_000))])
    n_starts = 1 if d <= 2 else 10
    f_max = _polish(spec, T, cand, vals, n_starts, sign=1.0)
    f_min = -_polish(spec, T, cand, -vals, n_starts, sign=-1.0)
    return f_max, f_min


def _polish(spec: OracleSpec, T: float, cand, vals, n_starts: int, sign: float) -> float:
    """Local refinement of the best sampled points (maximizes ``sign * f``).

    In more than two dimensions each start first gets cyclic coordinate
    sweeps over a dense 1-d grid, which escapes the many shallow local optima
    of the separable benchmarks, before the quasi-Newton polish.
    """
    best = float(np.max(vals))
    bounds = list(zip(spec.domain.lower, spec.domain.upper))

    def neg(x):
        return -sign * payoff(spec, x[None, :], T)[0]

    for i in np.argsort(-vals, kind="stable")[:n_starts]:
        x = cand[i].copy()
        if spec.dim_d > 2:
            x = _coordinate_sweeps(spec, T, x, sign)
        res = minimize(neg, x, method="L-BFGS-B", bounds=bounds, options={"ftol": 1e-15, "gtol": 1e-12})
        best = max(best, float(-res.fun), float(-neg(x)))
    return best


def _coordinate_sweeps(spec: OracleSpec, T: float, x, sign: float, max_sweeps: int = 20) -> np.ndarray:
    current = sign * payoff(spec, x[None, :], T)[0]
    for _ in range(max_sweeps):
        start = current
        for j in range(spec.dim_d):
            line = np.repeat(x[None, :], GRID_POINTS, axis=0)
            line[:, j] = np.linspace(spec.domain.lower[j], spec.domain.upper[j], GRID_POINTS)
            v = sign * payoff(spec, line, T)
            k = int(np.argmax(v))
            if v[k] > current:
                x, current = line[k], v[k]
        if current <= start:
            break
    return x


# ---------------------------------------------------------------------------
# tabular oracles

def _parse_table(path: Path, schema: dict | None):
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise FileNotFoundError(f"cannot read table {path}: {exc}") from exc
    lines = [(i, ln) for i, ln in enumerate(text.splitlines(), start=1) if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise TableParseError(f"{path}: empty table")
    reader = csv.reader([ln for _, ln in lines])
    header = [h.strip() for h in next(reader)]
    schema = schema or {}
    x_cols = schema.get("x") or [h for h in header if h.startswith("x")]
    t_col, y_col = schema.get("t", "t"), schema.get("y", "y")
    for col in [*x_cols, t_col, y_col]:
        if col not in header:
            raise TableParseError(f"{path}: missing column {col!r} in header {header}")
    if not x_cols:
        raise TableParseError(f"{path}: no action columns")
    idx = [header.index(c) for c in [*x_cols, t_col, y_col]]
    rows = []
    for (lineno, _), rec in zip(lines[1:], reader):
        if len(rec) != len(header):
            raise TableParseError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(rec)}")
        vals = []
        for j in idx:
            try:
                vals.append(float(rec[j]))
            except ValueError:
                raise TableParseError(f"{path}: line {lineno}, column {header[j]!r}: not a number: {rec[j]!r}") from None
        rows.append(vals)
    if not rows:
        raise TableParseError(f"{path}: no data rows")
    arr = np.asarray(rows)
    arr = arr[np.argsort(arr[:, -2], kind="stable")]
    return arr[:, :-2], arr[:, -2], arr[:, -1]


def load_table_oracle(path, schema: dict | None = None, noise_stddev: float | None = None, fit_starts: int = 4, seed: int = 0) -> OracleSpec:
    """Oracle backed by a CSV table with columns ``x1..xd, t, y``.

    ``schema`` may rename columns: ``{"x": [...], "t": ..., "y": ...}``.  The
    reference GP fitted here defines the noise-free payoff used for regret;
    its fitted noise level is the default observation noise.
    """
    path = Path(path)
    X, t, y = _parse_table(path, schema)
    data = Dataset(X, t, y)
    fit = fit_hyperparameters(data, n_starts=fit_starts, rng=seed)
    ref = build_model(data, fit.hyperparams)
    lo, hi = X.min(axis=0), X.max(axis=0)
    hi = np.where(hi > lo, hi, lo + 1.0)
    t0, t1 = float(t.min()), float(t.max())
    if not t1 > t0:
        t1 = t0 + 1.0
    if noise_stddev is None:
        noise_stddev = math.sqrt(fit.hyperparams.noise_variance)
    return OracleSpec(
        path.stem, X.shape[1], BoxDomain(tuple(lo), tuple(hi)), (t0, t1), float(noise_stddev),
        TABULAR, str(path.resolve()), ref, data,
    )
