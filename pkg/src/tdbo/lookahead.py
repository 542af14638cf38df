"""Recursive two-step lookahead expected payoff (r2LEY).

For a candidate ``x_next`` at time ``t_next`` the acquisition is the
expected value, over the simulated observation ``y_next``, of the largest
posterior mean at the horizon after conditioning on ``(x_next, t_next,
y_next)``.  It is estimated by Monte Carlo with common random numbers:

    y_i = mu(p) + sigma_pred(p) z_i,   p = (x_next, t_next)
    nu_i = max_x mu_i(x, T)

Every augmented model shares one inverse Gram matrix (it does not depend on
the observed values), so the extension is done once per candidate and the
augmented mean is affine in ``z_i``.  The ``M`` inner maximizations then run
as one batched ascent.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .acquisition import MeanMaxConfig, action_scale, maximize_posterior_mean
from .gp import PosteriorModel, extend_model_rank_one
from .kernel import k_grad_x, k_matrix
from .optimizer import BoxDomain, OptimizationError, ascend, maximize_box, multistart_seeds

log = logging.getLogger(__name__)

FULL = "full"
FIXED_Y = "paper-fixed-y"


@dataclass(frozen=True)
class LookaheadConfig:
    horizon_T: float
    mc_samples_M: int = 500
    inner_starts: int | None = None
    inner_pool: int | None = None
    outer_starts: int = 4
    gradient_mode: str = FULL
    crn_seed: int = 0
    inner_tol: float = 1e-9
    inner_ftol: float = 1e-10
    inner_max_iter: int = 200
    outer_tol: float = 1e-6
    # the outer objective is itself a Monte Carlo estimate; polishing its value
    # far below the sampling error only burns inner maximizations
    outer_ftol: float = 1e-9
    outer_max_iter: int = 200
    chunk: int = 2048

    def __post_init__(self):
        if self.mc_samples_M < 1:
            raise ValueError("need at least one Monte Carlo sample")
        if self.gradient_mode not in (FULL, FIXED_Y):
            raise ValueError(f"unknown gradient mode {self.gradient_mode!r}")

    def n_inner_starts(self, d: int) -> int:
        return self.inner_starts if self.inner_starts is not None else 4 + d

    def inner_pool_size(self, d: int) -> int:
        return self.inner_pool if self.inner_pool is not None else 64 * d

    def mean_max(self, d: int) -> MeanMaxConfig:
        return MeanMaxConfig(self.n_inner_starts(d), self.inner_pool_size(d), self.inner_tol, self.inner_max_iter)


class InnerMaxResult(NamedTuple):
    x_q_star: np.ndarray
    g_star_value: float


class LookaheadEstimate(NamedTuple):
    alpha: float
    grad: np.ndarray
    stderr: float


def crn_draws(cfg: LookaheadConfig, domain: BoxDomain, warm_start=None):
    """Standard-normal draws and the inner seed pool for one CRN stream."""
    z_ss, pool_ss = np.random.SeedSequence(cfg.crn_seed).spawn(2)
    z = np.random.default_rng(z_ss).standard_normal(cfg.mc_samples_M)
    pool = multistart_seeds(domain, cfg.inner_pool_size(domain.dim), np.random.default_rng(pool_ss), warm_start)
    return z, pool


def inner_max_posterior_mean(model_aug: PosteriorModel, T: float, domain: BoxDomain, config: LookaheadConfig, extra=None) -> InnerMaxResult:
    """Largest posterior mean at the horizon and its maximizer."""
    x, v = maximize_posterior_mean(model_aug, T, domain, config.mean_max(domain.dim), rng=config.crn_seed, extra=extra)
    return InnerMaxResult(domain.clip(x), v)


def final_decision(model: PosteriorModel, T: float, domain: BoxDomain, config: LookaheadConfig) -> np.ndarray:
    return inner_max_posterior_mean(model, T, domain, config).x_q_star


def r2ley_estimate(
    x_next,
    model: PosteriorModel,
    t_next: float,
    cfg: LookaheadConfig,
    domain: BoxDomain,
    z=None,
    warm_start=None,
) -> LookaheadEstimate:
    """Monte Carlo value and gradient of the two-step lookahead payoff.

    ``z`` overrides the CRN draws from ``cfg.crn_seed``.  ``warm_start`` is
    the unaugmented maximizer at the horizon; it joins the inner seed pool
    and is computed here when not supplied.
    """
    if t_next > cfg.horizon_T:
        raise ValueError(f"t_next={t_next} lies beyond the horizon {cfg.horizon_T}")
    T = cfg.horizon_T
    d = domain.dim
    x_next = np.atleast_1d(np.asarray(x_next, dtype=float))
    if warm_start is None:
        warm_start = inner_max_posterior_mean(model, T, domain, cfg).x_q_star
    z_crn, pool = crn_draws(cfg, domain, warm_start)
    z = z_crn if z is None else np.atleast_1d(np.asarray(z, dtype=float))
    M = z.size
    n = model.n

    mu_p, var_p, dmu_p, dvar_p = model.predict(x_next[None, :], t_next, grad=True)
    mu_p, var_p, dmu_p, dvar_p = mu_p[0], var_p[0], dmu_p[0], dvar_p[0]
    s = np.sqrt(var_p + model.hyperparams.noise_variance)
    ds = dvar_p / (2.0 * s) if s > 0 else np.zeros(d)

    # y enters the augmented weights linearly: beta_i = beta0 + z_i beta1
    aug = extend_model_rank_one(model, x_next, t_next, mu_p)
    A = aug.gram_inverse
    beta0 = np.asarray(aug.alpha_weights)
    beta1 = s * A[:, -1]
    BB = np.column_stack([beta0, beta1])
    Xa, ta, kp = aug.dataset.X, aug.dataset.t, aug.kernel

    a_pool, b_pool = (k_matrix(pool, T, Xa, ta, kp) @ BB).T
    k_starts = min(cfg.n_inner_starts(d), pool.shape[0])
    scale = action_scale(model)

    nu = np.empty(M)
    x_star = np.empty((M, d))
    for lo in range(0, M, cfg.chunk):
        zc = z[lo : lo + cfg.chunk]
        vals = a_pool[None, :] + zc[:, None] * b_pool[None, :]
        top = np.argsort(-vals, axis=1, kind="stable")[:, :k_starts]
        X0 = pool[top.reshape(-1)]
        zrow = np.repeat(zc, k_starts)

        def fun(X, rows, zrow=zrow):
            K = k_matrix(X, T, Xa, ta, kp)
            ab = K @ BB
            zr = zrow[rows]
            dK = k_grad_x(X, T, Xa, ta, kp, K=K)
            g = np.einsum("rnd,rn->rd", dK, beta0[None, :] + zr[:, None] * beta1[None, :])
            return ab[:, 0] + zr * ab[:, 1], g

        X, F, _ = ascend(fun, X0, domain, tol=cfg.inner_tol, max_iter=cfg.inner_max_iter, ftol=cfg.inner_ftol, scale=scale)
        F = F.reshape(-1, k_starts)
        best = np.argmax(np.where(np.isfinite(F), F, -np.inf), axis=1)
        rows = np.arange(F.shape[0]) * k_starts + best
        nu[lo : lo + zc.size] = F[np.arange(F.shape[0]), best]
        x_star[lo : lo + zc.size] = X[rows]
        # samples whose ascents all failed keep the best screened pool point
        lost = np.flatnonzero(~np.isfinite(F).any(axis=1))
        if lost.size:
            log.warning("inner ascent failed for %d samples; using the dense pool", lost.size)
            nu[lo + lost] = vals[lost, top[lost, 0]]
            x_star[lo + lost] = pool[top[lost, 0]]

    # Envelope theorem: differentiate k_*^T A_aug y_aug at fixed x_star.
    B = beta0[None, :] + z[:, None] * beta1[None, :]
    dk_star = k_grad_x(x_next[None, :], t_next, x_star, np.full(M, T), kp)[0]
    G = k_grad_x(x_next[None, :], t_next, model.dataset.X, model.dataset.t, kp)[0]
    dnu = np.empty((M, d))
    for lo in range(0, M, cfg.chunk):
        sl = slice(lo, lo + cfg.chunk)
        Ks = k_matrix(x_star[sl], T, Xa, ta, kp)
        W = Ks @ A
        Bc = B[sl]
        fixed = Bc[:, -1:] * dk_star[sl] - (W[:, -1:] * (Bc[:, :n] @ G) + Bc[:, -1:] * (W[:, :n] @ G))
        if cfg.gradient_mode == FULL:
            fixed = fixed + W[:, -1:] * (dmu_p[None, :] + z[sl, None] * ds[None, :])
        dnu[sl] = fixed

    if not np.all(np.isfinite(nu)):
        raise OptimizationError("inner maximization produced no finite value")
    alpha = float(np.mean(nu))
    stderr = float(np.std(nu, ddof=1) / np.sqrt(M)) if M > 1 else 0.0
    return LookaheadEstimate(alpha, np.mean(dnu, axis=0), stderr)


def propose_r2ley(model: PosteriorModel, t_next: float, cfg: LookaheadConfig, domain: BoxDomain, rng) -> np.ndarray:
    """Maximize the CRN-smoothed lookahead estimate over the box.

    A fresh CRN stream is drawn from ``rng`` and held fixed for the whole
    outer optimization.
    """
    rng = np.random.default_rng(rng)
    cfg = replace(cfg, crn_seed=int(rng.integers(2**63)))
    warm = inner_max_posterior_mean(model, cfg.horizon_T, domain, cfg).x_q_star

    def objective(x):
        est = r2ley_estimate(x, model, t_next, cfg, domain, warm_start=warm)
        return est.alpha, est.grad

    x, _ = maximize_box(
        objective,
        domain,
        cfg.outer_starts,
        rng,
        tol=cfg.outer_tol,
        max_iter=cfg.outer_max_iter,
        ftol=cfg.outer_ftol,
        scale=action_scale(model),
    )
    return domain.clip(x)
