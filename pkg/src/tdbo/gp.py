"""Zero-mean GP posterior over the joint (action, time) space."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.optimize import minimize

from .kernel import SQEXP, KernelParams, k_grad_x, k_matrix, k_theta_grads

log = logging.getLogger(__name__)

JITTER_START = 1e-10
JITTER_MAX = 1e-6
VARIANCE_NEG_TOL = 1e-8


class GPNumericalError(RuntimeError):
    pass


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray
    t: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        t = np.asarray(self.t, dtype=float).reshape(-1)
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if not (X.shape[0] == t.size == y.size):
            raise ValueError(f"length mismatch: X {X.shape[0]}, t {t.size}, y {y.size}")
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "t", _frozen(t))
        object.__setattr__(self, "y", _frozen(y))

    @classmethod
    def from_points(cls, points, values) -> "Dataset":
        X = [np.atleast_1d(np.asarray(x, dtype=float)) for x, _ in points]
        t = [float(tt) for _, tt in points]
        return cls(np.vstack(X) if X else np.empty((0, 1)), t, values)

    def __len__(self) -> int:
        return self.y.size

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def append(self, x, t, y) -> "Dataset":
        x = np.atleast_1d(np.asarray(x, dtype=float))[None, :]
        return Dataset(np.vstack([self.X, x]), np.append(self.t, t), np.append(self.y, y))


@dataclass(frozen=True)
class Hyperparams:
    kernel: KernelParams
    noise_variance: float

    def __post_init__(self):
        if not self.noise_variance >= 0:
            raise ValueError("noise variance must be nonnegative")

    def to_log_vector(self, noise_floor: float = 1e-300) -> np.ndarray:
        return np.append(self.kernel.to_log_vector(), np.log(max(self.noise_variance, noise_floor)))

    @classmethod
    def from_log_vector(cls, theta, t_form: str = SQEXP) -> "Hyperparams":
        theta = np.asarray(theta, dtype=float)
        return cls(KernelParams.from_log_vector(theta[:-1], t_form), float(np.exp(theta[-1])))


class PosteriorSummary(NamedTuple):
    mean: float
    variance: float


class PosteriorGradient(NamedTuple):
    mean_grad: np.ndarray
    std_grad: np.ndarray
    degenerate: bool


@dataclass(frozen=True, eq=False)
class PosteriorModel:
    """Fitted posterior snapshot.

    ``gram_inverse`` is the inverse of ``K + (noise + jitter) I`` and
    ``alpha_weights`` is that inverse applied to the observations.  The
    lower Cholesky factor ``chol`` of the same matrix is kept alongside;
    variances and covariances are formed through it, since products with the
    explicit inverse lose several digits on ill-conditioned Gram matrices.
    """

    dataset: Dataset
    hyperparams: Hyperparams
    gram_inverse: np.ndarray
    alpha_weights: np.ndarray
    jitter: float = 0.0
    chol: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.dataset)

    @property
    def dim(self) -> int:
        return self.dataset.dim

    @property
    def kernel(self) -> KernelParams:
        return self.hyperparams.kernel

    @property
    def diag_noise(self) -> float:
        return self.hyperparams.noise_variance + self.jitter

    def cross_cov(self, X, t) -> np.ndarray:
        """Covariance between query points and the training points, ``(R, n)``."""
        X = np.asarray(X, dtype=float).reshape(-1, self.dim)
        t = np.broadcast_to(np.asarray(t, dtype=float), (X.shape[0],))
        return k_matrix(X, t, self.dataset.X, self.dataset.t, self.kernel)

    def predict(self, X, t, grad: bool = False):
        """Latent mean and variance at rows of ``X`` (all at times ``t``).

        With ``grad=True`` also returns ``d mean / dx`` and ``d var / dx``,
        each of shape ``(R, d)``.
        """
        X = np.asarray(X, dtype=float).reshape(-1, self.dim)
        t = np.broadcast_to(np.asarray(t, dtype=float), (X.shape[0],))
        Ks = k_matrix(X, t, self.dataset.X, self.dataset.t, self.kernel)
        mean = Ks @ self.alpha_weights
        prior = self.kernel.x_signal_variance
        if self.chol is not None:
            half = solve_triangular(self.chol, Ks.T, lower=True, check_finite=False)
            var = prior - np.einsum("ij,ij->j", half, half)
        else:
            var = prior - np.einsum("ij,ij->i", Ks @ self.gram_inverse, Ks)
        if np.any(var < -VARIANCE_NEG_TOL * prior):
            raise GPNumericalError(f"negative posterior variance {var.min():.3e}")
        var = np.maximum(var, 0.0)
        if not grad:
            return mean, var
        if self.chol is not None:
            v = solve_triangular(self.chol.T, half, lower=False, check_finite=False).T
        else:
            v = Ks @ self.gram_inverse
        dK = k_grad_x(X, t, self.dataset.X, self.dataset.t, self.kernel, K=Ks)
        dmean = np.einsum("rnd,n->rd", dK, self.alpha_weights)
        dvar = -2.0 * np.einsum("rnd,rn->rd", dK, v)
        return mean, var, dmean, dvar

    def solve(self, b) -> np.ndarray:
        """``(K + noise I)^{-1} b`` through the Cholesky factor when present."""
        if self.chol is None:
            return self.gram_inverse @ b
        half = solve_triangular(self.chol, b, lower=True, check_finite=False)
        return solve_triangular(self.chol.T, half, lower=False, check_finite=False)


def _factor(K: np.ndarray, base: float, scale: float):
    """Cholesky of ``K + (base + jitter) I`` with escalating jitter."""
    n = K.shape[0]
    jitter = JITTER_START * scale
    while True:
        try:
            c = cho_factor(K + (base + jitter) * np.eye(n), lower=True, check_finite=True)
            return c, jitter
        except np.linalg.LinAlgError:
            if jitter >= JITTER_MAX * scale * (1 + 1e-9):
                cond = np.linalg.cond(K + base * np.eye(n))
                raise GPNumericalError(
                    f"Gram matrix (n={n}) not factorizable with jitter {jitter:.1e}; "
                    f"condition number {cond:.3e}"
                ) from None
            jitter *= 10.0


def build_model(dataset: Dataset, hp: Hyperparams) -> PosteriorModel:
    if len(dataset) == 0:
        raise ValueError("cannot build a posterior from an empty dataset")
    K = k_matrix(dataset.X, dataset.t, dataset.X, dataset.t, hp.kernel)
    c, jitter = _factor(K, hp.noise_variance, hp.kernel.x_signal_variance)
    inv = cho_solve(c, np.eye(len(dataset)))
    inv = 0.5 * (inv + inv.T)
    alpha = cho_solve(c, dataset.y)
    return PosteriorModel(dataset, hp, _frozen(inv), _frozen(alpha), jitter, _frozen(np.tril(c[0])))


def posterior_at(model: PosteriorModel, p) -> PosteriorSummary:
    x, t = p
    mean, var = model.predict(np.atleast_1d(x), t)
    return PosteriorSummary(float(mean[0]), float(var[0]))


def posterior_grad_at(model: PosteriorModel, p, min_std: float = 1e-12) -> PosteriorGradient:
    """Action gradients of the posterior mean and standard deviation.

    The standard deviation is treated as zero (``degenerate``) below
    ``min_std`` or at the jitter floor, where a noiseless training point
    leaves only the jitter as variance.
    """
    x, t = p
    _, var, dmean, dvar = model.predict(np.atleast_1d(x), t, grad=True)
    sd = np.sqrt(var[0])
    if sd <= min_std or var[0] <= 2.0 * model.jitter:
        return PosteriorGradient(dmean[0], np.zeros_like(dmean[0]), True)
    return PosteriorGradient(dmean[0], dvar[0] / (2.0 * sd), False)


def extend_model_rank_one(model: PosteriorModel, x_new, t_new: float, y_new: float) -> PosteriorModel:
    """Append one observation with block updates of the inverse and the
    Cholesky factor, O(n^2).

    Falls back to a fresh factorization when the Schur complement drops to
    the jitter floor.
    """
    x_new = np.atleast_1d(np.asarray(x_new, dtype=float))
    b = model.cross_cov(x_new[None, :], t_new)[0]
    c = model.kernel.x_signal_variance + model.diag_noise
    data = model.dataset.append(x_new, t_new, y_new)
    n = model.n
    if model.chol is not None:
        ell = solve_triangular(model.chol, b, lower=True, check_finite=False)
        s = c - ell @ ell
        u = solve_triangular(model.chol.T, ell, lower=False, check_finite=False)
    else:
        u = model.gram_inverse @ b
        s = c - b @ u
    if not s > JITTER_START * model.kernel.x_signal_variance:
        log.debug("Schur complement %.3e at jitter floor; dense refactorization", s)
        return build_model(data, model.hyperparams)
    A = model.gram_inverse
    inv = np.empty((n + 1, n + 1))
    inv[:n, :n] = A + np.outer(u, u) / s
    inv[:n, n] = inv[n, :n] = -u / s
    inv[n, n] = 1.0 / s
    chol = None
    if model.chol is not None:
        chol = np.zeros((n + 1, n + 1))
        chol[:n, :n] = model.chol
        chol[n, :n] = ell
        chol[n, n] = np.sqrt(s)
        chol = _frozen(chol)
    # alpha' = inv' @ y' without a product through the full matrix
    r = (float(y_new) - u @ model.dataset.y) / s
    alpha = np.append(model.alpha_weights - u * r, r)
    return PosteriorModel(data, model.hyperparams, _frozen(inv), _frozen(alpha), model.jitter, chol)


def predictive_std(model: PosteriorModel, x, t) -> float:
    _, var = model.predict(np.atleast_1d(x), t)
    return float(np.sqrt(var[0] + model.hyperparams.noise_variance))


def simulate_observation(model: PosteriorModel, p, z):
    """Reparameterized draw ``mu(p) + sigma_pred(p) * z`` of a noisy observation."""
    x, t = p
    mean, var = model.predict(np.atleast_1d(x), t)
    y = mean[0] + np.sqrt(var[0] + model.hyperparams.noise_variance) * np.asarray(z, dtype=float)
    return float(y) if y.ndim == 0 else y


# ---------------------------------------------------------------------------
# Marginal likelihood and hyperparameter fitting
# ---------------------------------------------------------------------------


def _lml_theta(theta, dataset: Dataset, t_form: str):
    hp = Hyperparams.from_log_vector(theta, t_form)
    kp = hp.kernel
    K = k_matrix(dataset.X, dataset.t, dataset.X, dataset.t, kp)
    n = len(dataset)
    c, jitter = _factor(K, hp.noise_variance, kp.x_signal_variance)
    alpha = cho_solve(c, dataset.y)
    L = c[0]
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    value = -0.5 * dataset.y @ alpha - 0.5 * logdet - 0.5 * n * np.log(2.0 * np.pi)
    Linv = solve_triangular(L, np.eye(n), lower=True)
    Kinv = Linv.T @ Linv
    W = np.outer(alpha, alpha) - Kinv
    grads = [0.5 * np.sum(W * dK) for dK in k_theta_grads(dataset.X, dataset.t, kp, K=K)]
    grads.append(0.5 * hp.noise_variance * np.trace(W))
    return float(value), np.asarray(grads)


def log_marginal_likelihood(dataset: Dataset, hp: Hyperparams):
    """Log evidence and its gradient with respect to ``hp.to_log_vector()``."""
    return _lml_theta(hp.to_log_vector(), dataset, hp.kernel.t_form)


@dataclass(frozen=True)
class FitResult:
    hyperparams: Hyperparams
    log_likelihood: float
    converged: bool
    warning: str | None = None


def default_log_bounds(dataset: Dataset, x_widths=None, time_span: float | None = None, t_form: str = SQEXP):
    """Box over log-hyperparameters: lengthscales within [1e-3, 1e3] of the
    input scale, signal variance within [1e-3, 1e3] of the mean square output,
    noise variance within [1e-8, 10] of it."""
    X, t, y = dataset.X, dataset.t, dataset.y
    if x_widths is None:
        x_widths = np.ptp(X, axis=0)
    x_widths = np.maximum(np.asarray(x_widths, dtype=float).reshape(-1), 1e-6)
    if time_span is None:
        time_span = float(np.ptp(t))
    time_span = max(float(time_span), 1e-6)
    yscale = max(float(np.mean(y**2)), 1e-6)
    lo = [np.log(1e-3 * w) for w in x_widths] + [np.log(1e-3 * yscale)]
    hi = [np.log(1e3 * w) for w in x_widths] + [np.log(1e3 * yscale)]
    if t_form == SQEXP:
        lo.append(np.log(1e-3 * time_span))
        hi.append(np.log(1e3 * time_span))
    else:
        # forgetting rate in 1 / time units
        lo.append(np.log(1e-3 / time_span))
        hi.append(np.log(1e3 / time_span))
    lo.append(np.log(1e-8 * yscale))
    hi.append(np.log(10.0 * yscale))
    return np.array(list(zip(lo, hi)))


def default_hyperparams(dataset: Dataset, x_widths=None, time_span=None, t_form: str = SQEXP) -> Hyperparams:
    """Data-scaled starting point: lengthscales at a quarter of the input
    range, signal variance at the mean square output, 1% noise variance."""
    b = default_log_bounds(dataset, x_widths, time_span, t_form)
    centre = b.mean(axis=1)  # log of the reference scales
    d = dataset.dim
    theta = centre.copy()
    theta[:d] += np.log(0.25)
    if t_form == SQEXP:
        theta[d + 1] += np.log(0.25)
    theta[-1] = centre[d] + np.log(1e-2)
    return Hyperparams.from_log_vector(np.clip(theta, b[:, 0], b[:, 1]), t_form)


def fit_hyperparameters(
    dataset: Dataset,
    bounds=None,
    n_starts: int = 8,
    rng=None,
    init: Hyperparams | None = None,
    t_form: str | None = None,
) -> FitResult:
    """Multistart L-BFGS-B maximization of the log evidence in log space.

    The first start is ``init`` (or a data-scaled default); remaining starts
    are log-uniform over the central part of ``bounds``.
    """
    if len(dataset) < 2:
        raise ValueError("hyperparameter fitting needs at least two observations")
    rng = np.random.default_rng(rng)
    if t_form is None:
        t_form = init.kernel.t_form if init is not None else SQEXP
    if bounds is None:
        bounds = default_log_bounds(dataset, t_form=t_form)
    bounds = np.asarray(bounds, dtype=float)
    start = init if init is not None else default_hyperparams(dataset, t_form=t_form)
    theta0 = np.clip(start.to_log_vector(), bounds[:, 0], bounds[:, 1])

    def negative(theta):
        try:
            v, g = _lml_theta(theta, dataset, t_form)
        except GPNumericalError:
            return 1e25, np.zeros_like(theta)
        if not np.isfinite(v):
            return 1e25, np.zeros_like(theta)
        return -v, -g

    f0 = negative(theta0)[0]
    best_theta, best_f = theta0, f0
    mid = bounds.mean(axis=1)
    half = 0.25 * (bounds[:, 1] - bounds[:, 0])
    starts = [theta0] + [rng.uniform(mid - half, mid + half) for _ in range(max(n_starts, 1) - 1)]
    for th in starts:
        try:
            res = minimize(negative, th, jac=True, method="L-BFGS-B", bounds=bounds)
        except (ValueError, np.linalg.LinAlgError) as exc:  # pragma: no cover - scipy edge cases
            log.debug("hyperparameter start failed: %s", exc)
            continue
        if np.isfinite(res.fun) and res.fun < best_f:
            best_theta, best_f = res.x, res.fun
    hp = Hyperparams.from_log_vector(best_theta, t_form)
    if best_f >= f0 and best_theta is theta0:
        if f0 >= 1e25:
            return FitResult(hp, float("-inf"), False, "no start produced a factorizable Gram matrix")
        return FitResult(hp, -f0, False, "no start improved on the initial hyperparameters")
    return FitResult(hp, -best_f, True)
