import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eqd.optimize import (OptimizationError, Schedule, adam_run, lbfgs_run, strong_wolfe,
                          train)


def sphere(p):
    return float(p @ p), 2 * p


def rosenbrock(p):
    x, y = p
    f = (1 - x) ** 2 + 100 * (y - x * x) ** 2
    g = np.array([-2 * (1 - x) - 400 * x * (y - x * x), 200 * (y - x * x)])
    return f, g


def quadratic(n, seed):
    rng = np.random.default_rng(seed)
    Q = rng.normal(size=(n, n))
    A = Q @ Q.T + n * np.eye(n)
    b = rng.normal(size=n)

    def f(p):
        return float(0.5 * p @ A @ p - b @ p), A @ p - b

    return f, np.linalg.solve(A, b)


def test_adam_first_step_is_lr():
    p, rec = adam_run(sphere, np.ones(4), lr=0.01, iters=1)
    np.testing.assert_allclose(p, 0.99, rtol=1e-6)
    assert rec[0].loss == 4.0


def test_adam_zero_gradient():
    p0 = np.array([1.0, -2.0])
    p, _ = adam_run(lambda p: (1.0, np.zeros(2)), p0, iters=50)
    np.testing.assert_array_equal(p, p0)


def test_adam_convex_quadratic():
    f, _ = quadratic(10, 0)
    p0 = np.full(10, 3.0)
    p, _ = adam_run(f, p0, lr=0.01, iters=1000)
    f_opt = f(np.linalg.solve(*_normal_eq(f)))[0]
    assert f(p)[0] - f_opt < 1e-6 * (f(p0)[0] - f_opt)


def _normal_eq(f):
    n = 10
    b = -f(np.zeros(n))[1]
    A = np.column_stack([f(e)[1] + b for e in np.eye(n)])
    return A, b


def test_adam_rejects_bad_start():
    with pytest.raises(OptimizationError):
        adam_run(lambda p: (math.inf, np.zeros(1)), np.zeros(1), iters=3)


@pytest.mark.parametrize("n", [2, 5, 8])
def test_lbfgs_quadratic_finite_termination(n):
    # with an exact line search BFGS is a conjugate-direction method
    f, x_star = quadratic(n, n)
    x, rec = lbfgs_run(f, np.ones(n), iters=n + 2, memory=10, c2=1e-8, gtol=1e-12)
    assert len(rec) <= n + 2
    f_star = f(x_star)[0]
    # loss agrees to the last bits; x to about sqrt(eps) since f is flat there
    assert f(x)[0] - f_star <= 4 * np.finfo(float).eps * max(1.0, abs(f_star))
    np.testing.assert_allclose(x, x_star, rtol=1e-6, atol=1e-8)


def test_lbfgs_at_minimum_stops_immediately():
    x0 = np.zeros(3)
    info = {}
    x, rec = lbfgs_run(sphere, x0, info=info)
    assert rec == [] and info["stop"] == "gtol"
    np.testing.assert_array_equal(x, x0)


def test_lbfgs_rosenbrock():
    x, _ = lbfgs_run(rosenbrock, np.array([-1.2, 1.0]), iters=1000)
    assert rosenbrock(x)[0] < 1e-10


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 12))
def test_lbfgs_accepted_losses_never_increase(seed, n):
    rng = np.random.default_rng(seed)
    scale = rng.uniform(0.5, 5, size=n)

    def f(p):
        # smooth non-quadratic bowl
        q = scale * p
        return float(np.sum(np.log(np.cosh(q))) + 0.1 * q @ q), np.tanh(q) * scale + 0.2 * scale * q

    x0 = rng.normal(size=n) * 3
    _, rec = lbfgs_run(f, x0, iters=60)
    losses = [f(x0)[0]] + [r.loss for r in rec]
    assert all(b <= a for a, b in zip(losses, losses[1:]))


def test_strong_wolfe_conditions():
    f, _ = quadratic(4, 1)
    x = np.ones(4)
    f0, g0 = f(x)
    t, ft, gt, _, ok = strong_wolfe(f, x, f0, g0, -g0, 1.0)
    assert ok
    assert ft <= f0 + 1e-4 * t * (g0 @ -g0)
    assert abs(gt @ -g0) <= 0.9 * abs(g0 @ -g0)


def test_train_returns_best_point():
    calls = []

    def f(p):
        calls.append(p.copy())
        return sphere(p)

    p0 = np.array([2.0, -1.0])
    p, tel = train(f, p0, Schedule(adam_iters=20, lbfgs_iters=20))
    assert tel.final_loss == pytest.approx(sphere(p)[0])
    assert tel.final_loss <= min(sphere(c)[0] for c in calls)
    assert tel.lbfgs_stop
