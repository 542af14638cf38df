"""Box-constrained multistart maximization.

Projected gradient ascent with Barzilai-Borwein step lengths and Armijo
backtracking.  All starts advance together as rows of one array, so a
vectorized objective ``f(X, rows) -> (values, grads)`` evaluates every active
start in a single call.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

ARMIJO_C = 1e-4
MAX_BACKTRACK = 40
# trial steps shorter than this fraction of the box width are roundoff
MIN_STEP = 1e-12
# consecutive accepted steps with negligible gain before a row counts as converged
FLAT_STEPS = 3


class OptimizationError(RuntimeError):
    pass


@dataclass(frozen=True)
class BoxDomain:
    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lower))
        hi = tuple(float(v) for v in np.atleast_1d(self.upper))
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if len(lo) != len(hi) or not lo:
            raise ValueError("bounds must be nonempty and of equal length")
        if not all(np.isfinite(lo + hi)) or any(a >= b for a, b in zip(lo, hi)):
            raise ValueError(f"need finite lower < upper, got {lo}, {hi}")

    @classmethod
    def cube(cls, lo: float, hi: float, dim: int) -> "BoxDomain":
        return cls((lo,) * dim, (hi,) * dim)

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def lb(self) -> np.ndarray:
        return np.asarray(self.lower)

    @property
    def ub(self) -> np.ndarray:
        return np.asarray(self.upper)

    @property
    def width(self) -> np.ndarray:
        return self.ub - self.lb

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lb + self.ub)

    def clip(self, X) -> np.ndarray:
        return np.clip(X, self.lb, self.ub)

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        slack = tol * self.width
        return bool(np.all(x >= self.lb - slack) and np.all(x <= self.ub + slack))

    def from_unit(self, U) -> np.ndarray:
        return self.lb + np.asarray(U) * self.width

    def sample_uniform(self, rng, n: int) -> np.ndarray:
        return self.from_unit(rng.random((n, self.dim)))


def multistart_seeds(domain: BoxDomain, n: int, rng, extra=None) -> np.ndarray:
    """Stratified (Latin hypercube) starting points, followed by any warm
    starts clamped into the box."""
    if n < 1:
        raise ValueError("need at least one seed")
    rng = np.random.default_rng(rng)
    d = domain.dim
    if n == 1:
        U = 0.5 + 0.5 * (rng.random((1, d)) - 0.5)
    else:
        U = np.empty((n, d))
        for j in range(d):
            U[:, j] = (rng.permutation(n) + rng.random(n)) / n
    seeds = domain.from_unit(U)
    if extra is not None and len(extra):
        seeds = np.vstack([seeds, domain.clip(np.asarray(extra, dtype=float).reshape(-1, d))])
    return seeds


def _proj_grad(domain: BoxDomain, X, G) -> np.ndarray:
    return domain.clip(X + G) - X


def ascend(fun, X0, domain: BoxDomain, tol: float = 1e-6, max_iter: int = 200, ftol: float = 1e-12, scale=None):
    """Independent projected-gradient ascents from every row of ``X0``.

    ``fun(X, rows)`` returns values ``(R,)`` and gradients ``(R, d)`` for the
    subset ``rows`` of the batch.  A row stops when its projected gradient
    falls to ``tol`` or after ``FLAT_STEPS`` accepted steps that each gain
    at most ``ftol * max(1, |f|)``.  ``scale`` is a per-coordinate length;
    steps are taken in ``x / scale``, which helps when the objective varies
    on very different lengths along different axes.  Returns final points,
    values and the number of iterations each row used.
    """
    sc = np.ones(domain.dim) if scale is None else np.asarray(scale, dtype=float).reshape(domain.dim)
    if not np.all(sc > 0):
        raise ValueError("scale must be positive")
    sc2 = sc**2
    # trust radius per step: one unit of scale, or the whole box when unscaled
    radius = 1.0 if scale is not None else float(np.max(domain.width))
    X = domain.clip(np.array(X0, dtype=float).reshape(-1, domain.dim))
    R = X.shape[0]
    rows = np.arange(R)
    F, G = fun(X, rows)
    F = np.array(F, dtype=float)
    G = np.array(G, dtype=float).reshape(R, -1)
    iters = np.zeros(R, dtype=int)
    flat = np.zeros(R, dtype=int)
    gmax = np.max(np.abs(G * sc), axis=1)
    step = np.minimum(0.1 * np.max(domain.width / sc) / np.maximum(gmax, 1e-12), 1e6)
    active = np.isfinite(F) & (np.max(np.abs(_proj_grad(domain, X, G)), axis=1) > tol)

    for it in range(max_iter):
        idx = rows[active]
        if idx.size == 0:
            break
        x, f, g, eta = X[idx], F[idx], G[idx], step[idx]
        eta = np.minimum(eta, radius / np.maximum(np.max(np.abs(g * sc), axis=1), 1e-300))
        pending = np.arange(idx.size)
        x_new = np.empty_like(x)
        f_new = np.full(idx.size, -np.inf)
        g_new = np.zeros_like(g)
        accepted = np.zeros(idx.size, dtype=bool)
        min_step = MIN_STEP * np.max(domain.width)
        for _ in range(MAX_BACKTRACK):
            cand = domain.clip(x[pending] + eta[pending, None] * g[pending] * sc2)
            tiny = np.max(np.abs(cand - x[pending]), axis=1) <= min_step
            if tiny.any():
                pending, cand = pending[~tiny], cand[~tiny]
                if pending.size == 0:
                    break
            fc, gc = fun(cand, idx[pending])
            fc = np.asarray(fc, dtype=float)
            gc = np.asarray(gc, dtype=float).reshape(len(pending), -1)
            gain = np.einsum("ij,ij->i", g[pending], cand - x[pending])
            ok = np.isfinite(fc) & (fc >= f[pending] + ARMIJO_C * gain)
            hit = pending[ok]
            x_new[hit], f_new[hit], g_new[hit] = cand[ok], fc[ok], gc[ok]
            accepted[hit] = True
            pending = pending[~ok]
            if pending.size == 0:
                break
            eta[pending] *= 0.5
        iters[idx] += 1
        # rows that could not make an Armijo step are stationary to precision
        stalled = idx[~accepted]
        active[stalled] = False
        acc = np.flatnonzero(accepted)
        if acc.size == 0:
            continue
        ia = idx[acc]
        s = x_new[acc] - x[acc]
        yv = g_new[acc] - g[acc]
        sy = -np.einsum("ij,ij->i", s, yv)
        ss = np.einsum("ij,ij->i", s / sc2, s)
        bb = np.where(sy > 0, ss / np.where(sy > 0, sy, 1.0), 2.0 * eta[acc])
        step[ia] = np.clip(bb, 1e-12, 1e6)
        moved = ss > 0
        small = f_new[acc] - f[acc] <= ftol * np.maximum(1.0, np.abs(f[acc]))
        flat[ia] = np.where(small, flat[ia] + 1, 0)
        X[ia], F[ia], G[ia] = x_new[acc], f_new[acc], g_new[acc]
        pg = np.max(np.abs(_proj_grad(domain, X[ia], G[ia])), axis=1)
        active[ia] = (pg > tol) & moved & (flat[ia] < FLAT_STEPS)
    return X, F, iters


def maximize_box(
    objective,
    domain: BoxDomain,
    n_starts: int,
    rng=None,
    tol: float = 1e-6,
    max_iter: int = 200,
    extra=None,
    pool: int = 0,
    vectorized: bool = False,
    ftol: float = 1e-12,
    scale=None,
):
    """Best local maximum over several starts.

    ``objective`` maps a point to ``(value, gradient)``; with
    ``vectorized=True`` it maps an ``(R, d)`` array to ``(R,)`` values and
    ``(R, d)`` gradients instead.  When ``pool`` is positive, that many
    stratified points are screened first and the ascent starts from the best
    ``n_starts`` of them (plus ``extra``).  Ties go to the lowest start index.
    """
    rng = np.random.default_rng(rng)
    if pool > 0:
        P = multistart_seeds(domain, pool, rng, extra)
        pv = _evaluate(objective, P, vectorized)[0]
        order = np.argsort(-np.where(np.isfinite(pv), pv, -np.inf), kind="stable")
        seeds = P[order[: max(n_starts, 1)]]
    else:
        seeds = multistart_seeds(domain, n_starts, rng, extra)

    def fun(X, rows):
        return _evaluate(objective, X, vectorized)

    X, F, _ = ascend(fun, seeds, domain, tol=tol, max_iter=max_iter, ftol=ftol, scale=scale)
    if not np.any(np.isfinite(F)):
        raise OptimizationError("objective failed at every start")
    best = int(np.argmax(np.where(np.isfinite(F), F, -np.inf)))
    return X[best].copy(), float(F[best])


def _evaluate(objective, X, vectorized: bool):
    if vectorized:
        v, g = objective(X)
        return np.asarray(v, dtype=float), np.asarray(g, dtype=float).reshape(X.shape)
    vals = np.empty(X.shape[0])
    grads = np.zeros_like(X)
    for i, x in enumerate(X):
        try:
            v, g = objective(x)
        except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
            log.debug("objective failed at %s: %s", x, exc)
            vals[i] = np.nan
            continue
        vals[i] = v
        grads[i] = g
    return vals, grads
