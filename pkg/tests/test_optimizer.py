import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tdbo.optimizer import BoxDomain, OptimizationError, ascend, maximize_box, multistart_seeds


def test_domain_validation():
    with pytest.raises(ValueError):
        BoxDomain((0.0,), (0.0,))
    with pytest.raises(ValueError):
        BoxDomain((0.0, 0.0), (1.0,))
    with pytest.raises(ValueError):
        BoxDomain((0.0,), (math.inf,))


def test_concave_quadratic_interior():
    dom = BoxDomain.cube(-2.0, 2.0, 3)
    c = np.array([0.3, -1.1, 1.7])
    x, v = maximize_box(lambda x: (-np.sum((x - c) ** 2), -2 * (x - c)), dom, 4, 0, tol=1e-9)
    np.testing.assert_allclose(x, c, atol=1e-6)


def test_linear_boundary():
    dom = BoxDomain.cube(0.0, 1.0, 2)
    x, v = maximize_box(lambda x: (x[0], np.array([1.0, 0.0])), dom, 3, 0)
    assert x[0] == 1.0 and v == 1.0


def test_quadratic_d_maximizer():
    T = 4.0
    f = lambda x: (-4 * (x[0] - 0.5) ** 2 + 2 * x[0] * math.sin(T) - math.sin(T) ** 2, np.array([-8 * (x[0] - 0.5) + 2 * math.sin(T)]))
    x, _ = maximize_box(f, BoxDomain((0.0,), (1.0,)), 4, 1, tol=1e-9)
    assert x[0] == pytest.approx(0.5 + math.sin(T) / 4, abs=1e-4)


def test_failed_starts_are_skipped_and_all_fail_raises():
    dom = BoxDomain((0.0,), (1.0,))

    def flaky(x):
        if x[0] < 0.5:
            raise ValueError("bad region")
        return -(x[0] - 0.8) ** 2, np.array([-2 * (x[0] - 0.8)])

    x, _ = maximize_box(flaky, dom, 8, 0, tol=1e-9)
    assert x[0] == pytest.approx(0.8, abs=1e-5)

    def broken(x):
        raise ValueError("always")

    with pytest.raises(OptimizationError):
        maximize_box(broken, dom, 3, 0)


def test_seeds():
    dom = BoxDomain((0.0, 10.0), (1.0, 20.0))
    one = multistart_seeds(dom, 1, 0)
    assert one.shape == (1, 2) and dom.contains(one[0])
    assert np.all(np.abs(one[0] - dom.center) <= dom.width / 4)
    warm = multistart_seeds(dom, 3, 0, extra=[[5.0, 5.0]])
    np.testing.assert_array_equal(warm[-1], [1.0, 10.0])
    np.testing.assert_array_equal(multistart_seeds(dom, 7, 3), multistart_seeds(dom, 7, 3))
    with pytest.raises(ValueError):
        multistart_seeds(dom, 0, 0)


def test_seeds_uniform_marginals():
    S = multistart_seeds(BoxDomain.cube(0.0, 1.0, 2), 100, 4)
    grid = np.linspace(0, 1, 101)
    for j in range(2):
        ecdf = np.searchsorted(np.sort(S[:, j]), grid, side="right") / 100
        assert np.max(np.abs(ecdf - grid)) < 0.1


def test_tie_goes_to_lowest_start():
    dom = BoxDomain((-1.0,), (1.0,))
    x, v = maximize_box(lambda x: (1.0, np.zeros(1)), dom, 5, 0)
    assert x[0] == multistart_seeds(dom, 5, np.random.default_rng(0))[0, 0]


@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
@settings(max_examples=40, deadline=None)
def test_never_regresses_and_stays_inside(seed, a, b):
    dom = BoxDomain((-1.0, -1.0), (2.0, 1.0))

    def f(X, rows):
        v = np.sin(a * X[:, 0]) + np.cos(b * X[:, 1]) + 0.1 * X[:, 0] * X[:, 1]
        g = np.column_stack([a * np.cos(a * X[:, 0]) + 0.1 * X[:, 1], -b * np.sin(b * X[:, 1]) + 0.1 * X[:, 0]])
        return v, g

    X0 = multistart_seeds(dom, 6, seed)
    v0, _ = f(X0, None)
    X, F, _ = ascend(f, X0, dom)
    assert np.all(F >= v0 - 1e-12)
    assert np.all(X >= dom.lb) and np.all(X <= dom.ub)
    np.testing.assert_allclose(f(X, None)[0], F)


def _ill_conditioned(X):
    """Curvature 1 along x0, 1e-8 along x1; maximum at (0.3, 50) on the box edge."""
    a = np.array([1.0, 1e-8])
    c = np.array([0.3, 50.0])
    return -np.sum(a * (X - c) ** 2, axis=1), -2 * a * (X - c)


def test_scaled_ascent_handles_ill_conditioning():
    dom = BoxDomain((-1.0, -10.0), (1.0, 10.0))
    X0 = np.array([[0.9, -9.0], [-0.5, 0.0]])
    Xs, Fs, it_s = ascend(lambda X, rows: _ill_conditioned(X), X0, dom, tol=1e-10, scale=[1.0, 1e4])
    np.testing.assert_allclose(Xs, [[0.3, 10.0], [0.3, 10.0]], atol=1e-6)
    assert it_s.max() < 50
    Xp, Fp, it_p = ascend(lambda X, rows: _ill_conditioned(X), X0, dom, tol=1e-10)
    assert np.all(Fs >= Fp - 1e-12) and it_s.max() < it_p.max()


def test_flat_progress_stops_rows():
    dom = BoxDomain((0.0,), (1.0,))

    def slow(X, rows):
        # maximum at the bound with a gradient far below any useful gain
        return 1e-14 * X[:, 0], np.full_like(X, 1e-14)

    _, _, it = ascend(slow, np.array([[0.1]]), dom, tol=0.0, ftol=1e-12)
    assert it[0] <= 4


def test_scale_validation():
    with pytest.raises(ValueError):
        ascend(lambda X, rows: _ill_conditioned(X), np.zeros((1, 2)), BoxDomain.cube(0.0, 1.0, 2), scale=[1.0, 0.0])
