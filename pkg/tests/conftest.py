import numpy as np
import pytest

from tdbo.gp import Dataset, Hyperparams, build_model, fit_hyperparameters
from tdbo.kernel import KernelParams
from tdbo.optimizer import BoxDomain


def quad_d(x, t):
    return -4.0 * (x - 0.5) ** 2 + 2.0 * x * np.sin(t) - np.sin(t) ** 2


def quad_d_dataset(rng, n=40, t_end=2.0, noise=0.02):
    t = np.linspace(0.0, t_end, n)
    x = rng.random(n)
    y = quad_d(x, t) + noise * rng.standard_normal(n)
    return Dataset(x[:, None], t, y)


def quad_d_model(seed=0, n=40, noise=0.02, fit=True):
    rng = np.random.default_rng(seed)
    data = quad_d_dataset(rng, n=n, noise=noise)
    if fit:
        hp = fit_hyperparameters(data, n_starts=2, rng=seed).hyperparams
    else:
        hp = Hyperparams(KernelParams((0.5,), 1.0, t_lengthscale=1.5), noise**2)
    return build_model(data, hp)


def random_model(rng, n=10, d=2, noise=0.05):
    X = rng.random((n, d))
    t = np.sort(rng.uniform(0, 2, n))
    y = rng.standard_normal(n)
    hp = Hyperparams(KernelParams(tuple(rng.uniform(0.3, 1.0, d)), rng.uniform(0.5, 2.0), t_lengthscale=rng.uniform(0.5, 2)), noise)
    return build_model(Dataset(X, t, y), hp)


@pytest.fixture(scope="session")
def unit():
    return BoxDomain((0.0,), (1.0,))


@pytest.fixture(scope="session")
def qd_model():
    return quad_d_model(0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
