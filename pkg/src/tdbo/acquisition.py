"""Time-dependent myopic acquisitions and the Random baseline."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .gp import PosteriorModel
from .optimizer import BoxDomain, OptimizationError, maximize_box, multistart_seeds

log = logging.getLogger(__name__)

EIMUMAX = "EImumax"
PIMUMAX = "PImumax"
UCB = "UCB"
RANDOM = "Random"
REI = "R-EI"
KINDS = (EIMUMAX, PIMUMAX, UCB, RANDOM, REI)

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _phi(u):
    return _INV_SQRT_2PI * np.exp(-0.5 * np.square(u))


@dataclass(frozen=True)
class AcquisitionParams:
    kind: str
    ucb_beta: float = 2.0
    n_starts: int = 4
    pool: int | None = None
    tol: float = 1e-6

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown acquisition {self.kind!r}; expected one of {KINDS}")
        if self.kind == UCB and not self.ucb_beta > 0:
            raise ValueError("UCB needs a positive beta")


@dataclass(frozen=True)
class MeanMaxConfig:
    n_starts: int = 4
    pool: int | None = None
    tol: float = 1e-9
    max_iter: int = 200

    def pool_size(self, d: int) -> int:
        return self.pool if self.pool is not None else 64 * d


def ei(mu, sigma, xi):
    """Expected improvement ``E[(Y - xi)^+]`` for ``Y ~ N(mu, sigma^2)``."""
    mu, sigma = np.asarray(mu, dtype=float), np.asarray(sigma, dtype=float)
    diff = mu - xi
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        u = diff / sigma
        val = sigma * _phi(u) + diff * ndtr(u)
    val = np.where(sigma > 0, val, np.maximum(diff, 0.0))
    val = np.maximum(val, 0.0)
    return float(val) if val.ndim == 0 else val


def pi(mu, sigma, xi):
    mu, sigma = np.asarray(mu, dtype=float), np.asarray(sigma, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        val = ndtr((mu - xi) / sigma)
    val = np.where(sigma > 0, val, (mu >= xi).astype(float))
    return float(val) if val.ndim == 0 else val


def ucb(mu, sigma, beta):
    val = np.asarray(mu, dtype=float) + np.sqrt(beta) * np.asarray(sigma, dtype=float)
    return float(val) if val.ndim == 0 else val


def action_scale(model: PosteriorModel) -> np.ndarray:
    """Per-coordinate step lengths for ascents on GP-derived surfaces.

    GP means and acquisitions vary on the kernel lengthscales, so steps are
    measured in lengthscales.  Coordinates with lengthscales far beyond the
    box are nearly linear and reach a bound in one projected step.
    """
    return np.asarray(model.kernel.x_lengthscales, dtype=float).copy()


def _mean_objective(model: PosteriorModel, t: float):
    def f(X):
        mean, _, dmean, _ = model.predict(X, t, grad=True)
        return mean, dmean

    return f


def maximize_posterior_mean(model: PosteriorModel, t: float, domain: BoxDomain, cfg: MeanMaxConfig | None = None, rng=0, extra=None):
    """``(argmax_x mu(x, t), max value)`` over the box.

    Falls back to the best of a dense space-filling sample when every ascent
    fails.
    """
    cfg = cfg or MeanMaxConfig()
    try:
        return maximize_box(
            _mean_objective(model, t),
            domain,
            cfg.n_starts,
            rng,
            tol=cfg.tol,
            max_iter=cfg.max_iter,
            extra=extra,
            pool=cfg.pool_size(domain.dim),
            vectorized=True,
            scale=action_scale(model),
        )
    except OptimizationError as exc:
        log.warning("posterior-mean ascent failed (%s); using the best dense sample", exc)
        X = multistart_seeds(domain, 1024 * domain.dim, rng, extra)
        mean = model.predict(X, t)[0]
        i = int(np.nanargmax(mean))
        return X[i], float(mean[i])


def target_mu_max(model: PosteriorModel, t: float, domain: BoxDomain, cfg: MeanMaxConfig | None = None, rng=0) -> float:
    return maximize_posterior_mean(model, t, domain, cfg, rng)[1]


def _score(kind: str, model: PosteriorModel, t: float, xi: float, beta: float):
    """Vectorized score with its action gradient."""

    def f(X):
        mean, var, dmean, dvar = model.predict(X, t, grad=True)
        sd = np.sqrt(var)
        safe = sd > 1e-12
        dsd = np.where(safe[:, None], dvar / (2.0 * np.where(safe, sd, 1.0))[:, None], 0.0)
        if kind == UCB:
            return ucb(mean, sd, beta), dmean + np.sqrt(beta) * dsd
        u = np.where(safe, (mean - xi) / np.where(safe, sd, 1.0), 0.0)
        du = np.where(safe[:, None], (dmean - u[:, None] * dsd) / np.where(safe, sd, 1.0)[:, None], 0.0)
        if kind == PIMUMAX:
            return pi(mean, sd, xi), _phi(u)[:, None] * du
        # d EI = Phi(u) dmu + phi(u) dsigma
        grad = ndtr(u)[:, None] * dmean + _phi(u)[:, None] * dsd
        grad = np.where(safe[:, None], grad, np.where((mean > xi)[:, None], dmean, 0.0))
        return ei(mean, sd, xi), grad

    return f


def propose_myopic(
    params: AcquisitionParams,
    model: PosteriorModel,
    t_next: float,
    domain: BoxDomain,
    rng,
    final_step: bool = False,
) -> np.ndarray:
    """Next action under a myopic rule.

    ``final_step`` switches R-EI from Random to EImumax.
    """
    rng = np.random.default_rng(rng)
    kind = params.kind
    if kind == REI:
        kind = EIMUMAX if final_step else RANDOM
    if kind == RANDOM:
        return domain.sample_uniform(rng, 1)[0]
    seed = int(rng.integers(2**63))
    pool = params.pool if params.pool is not None else 64 * domain.dim
    xi = 0.0
    if kind in (EIMUMAX, PIMUMAX):
        xi = target_mu_max(model, t_next, domain, rng=seed)
    x, _ = maximize_box(
        _score(kind, model, t_next, xi, params.ucb_beta),
        domain,
        params.n_starts,
        seed + 1,
        tol=params.tol,
        pool=pool,
        vectorized=True,
        scale=action_scale(model),
    )
    return domain.clip(x)
