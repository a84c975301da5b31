import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eqd.dynamics import InvalidConfigError, ObservationMask, SystemSpec, lv3_rhs
from eqd.hybrid import HybridField, hybrid_rhs, loss_and_grad, masked_mse, network_outputs
from eqd.neuralnet import MLPSpec, flatten, init_params
from eqd.odesolver import SolverConfig, Trajectory, integrate

LV = SystemSpec("LotkaVolterra3")
LZ = SystemSpec("Lorenz5")


def lv_field(params=None, hidden=(40, 40)):
    spec = MLPSpec(3, hidden, 1)
    return HybridField(LV, (1,), spec, np.zeros(spec.n_params) if params is None else params)


def lv_data(t1=0.25):
    return integrate(LV.rhs, LV.initial_condition, (0, t1), 0.05)


def test_zero_network_lv():
    np.testing.assert_allclose(hybrid_rhs(lv_field(), (0.5, 1, 2)), (0, 0, 0), atol=1e-15)


def test_zero_network_lorenz():
    spec = MLPSpec(5, (8,), 2)
    f = HybridField(LZ, (0, 1), spec, np.zeros(spec.n_params))
    np.testing.assert_allclose(hybrid_rhs(f, (-8, 8, 27, 0.4, 0.5)),
                               (0, 0, -132.8, -210.53333333333333, -11.733333333333333))


def test_perfect_surrogate_reproduces_system(rng):
    # the hybrid with the true equation substituted for the network output
    f = lv_field(rng.normal(size=lv_field().net_spec.n_params))
    for _ in range(5):
        u = rng.uniform(0.1, 3, size=3)
        out = hybrid_rhs(f, u)
        out[1] = lv3_rhs(u)[1]
        np.testing.assert_allclose(out, lv3_rhs(u), rtol=1e-14)
        np.testing.assert_allclose(hybrid_rhs(f, u)[1], network_outputs(f, u)[0, 0])


def test_field_validation():
    with pytest.raises(InvalidConfigError):
        HybridField(LV, (0, 1, 2), MLPSpec(3, (), 3), np.zeros(12))
    with pytest.raises(InvalidConfigError):
        HybridField(LV, (1,), MLPSpec(3, (), 2), np.zeros(8))


def test_masked_mse_hand_value():
    t = np.array([0.0, 1.0])
    truth = Trajectory(t, [[1.0], [2.0]])
    pred = Trajectory(t, [[1.0], [4.0]])
    assert masked_mse(pred, truth, ObservationMask((True,))) == 2.0
    assert masked_mse(truth, truth, ObservationMask((True,))) == 0.0


@settings(max_examples=20, deadline=None)
@given(st.floats(-100, 100), st.integers(0, 6))
def test_masked_mse_ignores_hidden_channel(value, row):
    base = lv_data()
    mask = ObservationMask.hiding(3, [1])
    pred = Trajectory(base.times, base.states + 0.1)
    changed = pred.states.copy()
    changed[row % len(base), 1] = value
    assert masked_mse(Trajectory(base.times, changed), base, mask) == masked_mse(pred, base, mask)


def fd_check(field, data, mask, window, solver, rng, n_coords=12):
    loss, grad = loss_and_grad(field, data, mask, window, solver)
    p = field.params
    worst = 0.0
    for i in rng.choice(p.size, size=min(n_coords, p.size), replace=False):
        h = 1e-6 * max(1.0, abs(p[i]))
        e = np.zeros_like(p)
        e[i] = h
        fp = loss_and_grad(field.with_params(p + e), data, mask, window, solver)[0]
        fm = loss_and_grad(field.with_params(p - e), data, mask, window, solver)[0]
        fd = (fp - fm) / (2 * h)
        worst = max(worst, abs(grad[i] - fd) / max(abs(fd), abs(grad[i]), 1e-8))
    return worst


def test_gradient_matches_finite_differences_lv(rng):
    spec = MLPSpec(3, (4,), 1)
    field = HybridField(LV, (1,), spec, init_params(spec, 3))
    err = fd_check(field, lv_data(), ObservationMask.hiding(3, [1]), (0, 0.25),
                   SolverConfig.fixed(0.05), rng)
    assert err < 1e-4


def test_gradient_is_deterministic():
    spec = MLPSpec(3, (4,), 1)
    field = HybridField(LV, (1,), spec, init_params(spec, 3))
    args = (lv_data(), ObservationMask.hiding(3, [1]), (0, 0.25), SolverConfig.fixed(0.05))
    a = loss_and_grad(field, *args)[1]
    b = loss_and_grad(field, *args)[1]
    assert a.tobytes() == b.tobytes()


def test_y0_gradient(rng):
    spec = MLPSpec(3, (4,), 1)
    field = HybridField(LV, (1,), spec, init_params(spec, 5))
    data = lv_data()
    args = (data, ObservationMask.hiding(3, [1]), (0, 0.25), SolverConfig.fixed(0.05))
    y0 = np.array(LV.initial_condition) + 0.05
    _, _, gy = loss_and_grad(field, *args, y0=y0, return_y0_grad=True)
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1e-6
        fd = (loss_and_grad(field, *args, y0=y0 + e)[0]
              - loss_and_grad(field, *args, y0=y0 - e)[0]) / 2e-6
        assert gy[i] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_divergence_gives_inf_sentinel():
    spec = MLPSpec(3, (), 1)
    W = np.array([[0.0, 1e6, 0.0]])
    field = HybridField(LV, (1,), spec, flatten([(W, np.zeros(1))]))
    loss, grad = loss_and_grad(field, lv_data(1.0), ObservationMask.hiding(3, [1]), (0, 1.0),
                               SolverConfig.fixed(0.05))
    assert loss == float("inf")
    np.testing.assert_array_equal(grad, 0.0)


def test_exact_surrogate_has_zero_loss():
    # data generated by the hybrid itself
    spec = MLPSpec(3, (4,), 1)
    field = HybridField(LV, (1,), spec, init_params(spec, 9))
    solver = SolverConfig.fixed(0.05)
    synth = integrate(field.evaluator(), LV.initial_condition, (0, 0.25), 0.05, solver)
    loss, grad = loss_and_grad(field, synth, ObservationMask.hiding(3, [1]), (0, 0.25), solver)
    assert loss < 1e-25
    assert np.linalg.norm(grad) < 1e-10
