"""Product covariance over (action, time) pairs.

The action part is an ARD squared-exponential carrying the signal variance.
The time part is either a unit-amplitude squared-exponential or the
forgetting-factor form ``(1 - eps) ** (|t - t'| / 2)``.

Matrix routines take actions as ``(n, d)`` arrays and times as ``(n,)``
arrays; the scalar ``eval_*`` helpers wrap them for single pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

SQEXP = "sqexp"
FORGETTING = "forgetting"
T_FORMS = (SQEXP, FORGETTING)


@dataclass(frozen=True)
class KernelParams:
    x_lengthscales: tuple[float, ...]
    x_signal_variance: float = 1.0
    t_form: str = SQEXP
    t_lengthscale: float = 1.0
    forgetting_epsilon: float = 0.0

    def __post_init__(self):
        ls = tuple(float(v) for v in np.atleast_1d(self.x_lengthscales))
        object.__setattr__(self, "x_lengthscales", ls)
        if not ls or any(not v > 0 for v in ls):
            raise ValueError(f"lengthscales must be positive, got {ls}")
        if not self.x_signal_variance > 0:
            raise ValueError("signal variance must be positive")
        if self.t_form not in T_FORMS:
            raise ValueError(f"unknown time kernel form {self.t_form!r}")
        if not self.t_lengthscale > 0:
            raise ValueError("time lengthscale must be positive")
        if not 0.0 <= self.forgetting_epsilon < 1.0:
            raise ValueError("forgetting epsilon must lie in [0, 1)")

    @property
    def dim(self) -> int:
        return len(self.x_lengthscales)

    @property
    def lengthscales(self) -> np.ndarray:
        return np.asarray(self.x_lengthscales)

    @property
    def forgetting_rate(self) -> float:
        # (1 - eps)^(|dt|/2) == exp(-rate * |dt|)
        return -0.5 * np.log1p(-self.forgetting_epsilon)

    # Log-space vector used by the marginal-likelihood fit:
    # [log l_1..l_d, log sf2, log(time scale)].  The time entry is the
    # lengthscale (sqexp) or the forgetting rate (forgetting form).
    def to_log_vector(self) -> np.ndarray:
        tpar = self.t_lengthscale if self.t_form == SQEXP else max(self.forgetting_rate, 1e-300)
        return np.concatenate([np.log(self.lengthscales), [np.log(self.x_signal_variance), np.log(tpar)]])

    @classmethod
    def from_log_vector(cls, theta, t_form: str = SQEXP) -> "KernelParams":
        theta = np.asarray(theta, dtype=float)
        d = theta.size - 2
        ls = tuple(np.exp(theta[:d]))
        sf2 = float(np.exp(theta[d]))
        tpar = float(np.exp(theta[d + 1]))
        if t_form == SQEXP:
            return cls(ls, sf2, SQEXP, t_lengthscale=tpar)
        eps = float(-np.expm1(-2.0 * tpar))
        return cls(ls, sf2, FORGETTING, forgetting_epsilon=min(eps, np.nextafter(1.0, 0.0)))

    def with_signal_variance(self, sf2: float) -> "KernelParams":
        return replace(self, x_signal_variance=float(sf2))


def _as_2d(X, d: int) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, d) if d > 1 or X.size == 0 else X[:, None]
    if X.shape[1] != d:
        raise ValueError(f"expected actions of dimension {d}, got {X.shape[1]}")
    return X


def kx_matrix(X1, X2, params: KernelParams) -> np.ndarray:
    """ARD squared-exponential cross-covariance, shape ``(n1, n2)``."""
    X1 = _as_2d(X1, params.dim) / params.lengthscales
    X2 = _as_2d(X2, params.dim) / params.lengthscales
    if params.dim == 1:
        sq = (X1[:, :1] - X2[:, 0][None, :]) ** 2
    else:
        sq = (
            np.sum(X1**2, axis=1)[:, None]
            + np.sum(X2**2, axis=1)[None, :]
            - 2.0 * X1 @ X2.T
        )
        np.maximum(sq, 0.0, out=sq)
    return params.x_signal_variance * np.exp(-0.5 * sq)


def kt_matrix(t1, t2, params: KernelParams) -> np.ndarray:
    dt = np.asarray(t1, dtype=float).reshape(-1)[:, None] - np.asarray(t2, dtype=float).reshape(-1)[None, :]
    if params.t_form == SQEXP:
        return np.exp(-0.5 * (dt / params.t_lengthscale) ** 2)
    return np.exp(-params.forgetting_rate * np.abs(dt))


def k_matrix(X1, t1, X2, t2, params: KernelParams) -> np.ndarray:
    return kx_matrix(X1, X2, params) * kt_matrix(t1, t2, params)


def k_grad_x(X1, t1, X2, t2, params: KernelParams, K=None) -> np.ndarray:
    """Derivative of ``k((x1, t1), (x2, t2))`` with respect to ``x1``.

    Returns an array of shape ``(n1, n2, d)``.  ``K`` may be passed when the
    covariance block has already been computed.
    """
    X1 = _as_2d(X1, params.dim)
    X2 = _as_2d(X2, params.dim)
    if K is None:
        K = k_matrix(X1, t1, X2, t2, params)
    diff = (X1[:, None, :] - X2[None, :, :]) / params.lengthscales**2
    return -K[:, :, None] * diff


def k_theta_grads(X, t, params: KernelParams, K=None) -> list[np.ndarray]:
    """Gram-matrix derivatives with respect to each entry of ``to_log_vector``."""
    X = _as_2d(X, params.dim)
    if K is None:
        K = k_matrix(X, t, X, t, params)
    grads = []
    for j in range(params.dim):
        dx = (X[:, None, j] - X[None, :, j]) / params.x_lengthscales[j]
        grads.append(K * dx**2)
    grads.append(K.copy())
    t = np.asarray(t, dtype=float).reshape(-1)
    dt = t[:, None] - t[None, :]
    if params.t_form == SQEXP:
        grads.append(K * (dt / params.t_lengthscale) ** 2)
    else:
        grads.append(-K * params.forgetting_rate * np.abs(dt))
    return grads


def _split(p):
    x, t = p
    return np.atleast_1d(np.asarray(x, dtype=float)), float(t)


def eval_kx(x, x2, params: KernelParams) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if x.shape != x2.shape or x.size != params.dim:
        raise ValueError(f"dimension mismatch: {x.shape}, {x2.shape}, {params.dim} lengthscales")
    r2 = np.sum(((x - x2) / params.lengthscales) ** 2)
    return float(params.x_signal_variance * np.exp(-0.5 * r2))


def eval_kt(t, t2, params: KernelParams) -> float:
    return float(kt_matrix([t], [t2], params)[0, 0])


def eval_k(p, p2, params: KernelParams) -> float:
    (x, t), (x2, t2) = _split(p), _split(p2)
    return eval_kx(x, x2, params) * eval_kt(t, t2, params)


def grad_k_wrt_x(p, p2, params: KernelParams) -> np.ndarray:
    (x, t), (x2, t2) = _split(p), _split(p2)
    if x.shape != x2.shape or x.size != params.dim:
        raise ValueError("dimension mismatch")
    k = eval_k((x, t), (x2, t2), params)
    return -k * (x - x2) / params.lengthscales**2
