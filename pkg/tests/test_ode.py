import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from attrakt.errors import DomainError
from attrakt.ode import integrate, integrate_batch


def oscillator(Y):
    return np.c_[Y[:, 1], -Y[:, 0]]


def test_zero_field_keeps_state():
    tr = integrate(lambda x: np.zeros_like(x), [1.0, -2.0, 3.0], 10.0)
    assert tr.status == "ok"
    assert np.array_equal(tr.final_state, [1.0, -2.0, 3.0]) and tr.final_time == 10.0


def test_linear_decay_closed_form():
    x0 = np.array([1.0, -0.5, 2.0])
    for tol in (1e-6, 1e-9, 1e-12):
        tr = integrate(lambda x: -2 * x, x0, 3.0, tol)
        exact = x0 * math.exp(-6.0)
        assert np.max(np.abs(tr.final_state - exact)) <= 50 * tol


def test_self_convergence():
    x0 = np.array([[1.0, 0.0]])
    T = 2 * math.pi
    errs = []
    for tol in (1e-4, 1e-6, 1e-8, 1e-10):
        y = integrate_batch(oscillator, x0, T, tol)[0].final_state
        errs.append(np.linalg.norm(y - x0[0]))
    assert all(b < a for a, b in zip(errs, errs[1:]))
    assert errs[-1] <= 1e-8


def test_matches_scipy_reference():
    def lorenz(Y):
        x, y, z = Y.T
        return np.c_[10 * (y - x), x * (28 - z) - y, x * y - 8 / 3 * z]

    ref = solve_ivp(lambda t, u: lorenz(u[None])[0], (0, 1.0), [1.0, 1.0, 1.0],
                    method="DOP853", rtol=1e-13, atol=1e-13)
    got = integrate_batch(lorenz, [[1.0, 1.0, 1.0]], 1.0, 1e-11)[0]
    assert np.max(np.abs(got.final_state - ref.y[:, -1])) <= 1e-6


def test_dense_output():
    tr = integrate_batch(oscillator, [[1.0, 0.0]], 5.0, 1e-10)[0]
    t = np.linspace(0, 5, 333)
    exact = np.c_[np.cos(t), -np.sin(t)]
    assert np.max(np.abs(tr.at(t) - exact)) <= 1e-6
    with pytest.raises(DomainError):
        tr.at(5.5)


def test_batch_rows_independent():
    X0 = np.array([[1.0, 0.0], [0.0, 3.0], [-2.0, 0.5]])
    batch = integrate_batch(oscillator, X0, 4.0, 1e-9)
    for row, tr in zip(X0, batch):
        single = integrate_batch(oscillator, row[None], 4.0, 1e-9)[0]
        assert np.array_equal(tr.final_state, single.final_state)
        assert tr.accepted_steps == single.accepted_steps


def test_stop_and_stagnation():
    tr = integrate(lambda x: -x, [1.0], 10.0, 1e-9, stop=lambda x: x[0] < 0.5)
    assert tr.status == "stopped" and tr.final_state[0] < 0.5
    assert tr.final_time == pytest.approx(math.log(2), abs=0.2)
    tr = integrate(lambda x: np.zeros_like(x), [1.0], 10.0, stall=lambda x, f: True)
    assert tr.status == "stagnation" and tr.failed


def test_blow_up_fails():
    tr = integrate(lambda x: x * x, [1.0], 2.0, 1e-8)
    assert tr.failed and tr.final_time < 1.0 + 1e-3


def test_keep_from_window_is_exact():
    tr = integrate_batch(oscillator, [[1.0, 0.0]], 10.0, 1e-10, keep_from=7.3)[0]
    assert tr.times[0] == 0.0
    assert tr.times[1] <= 7.3 < tr.times[2]
    t = np.linspace(7.3, 10.0, 100)
    assert np.max(np.abs(tr.at(t) - np.c_[np.cos(t), -np.sin(t)])) <= 1e-6


def test_step_cap_and_phi_recorded():
    tr = integrate(lambda x: -x, [1.0], 1.0, 1e-6, step_cap=lambda x, f: 0.01,
                   phi=lambda x: x @ x)
    assert np.all(np.diff(tr.times) <= 0.01 + 1e-15)
    assert np.allclose(tr.phi_values, np.sum(tr.states**2, axis=1), rtol=1e-14)


def test_argument_errors():
    with pytest.raises(DomainError):
        integrate(lambda x: x, [1.0], 1.0, tol=0.0)
    with pytest.raises(DomainError):
        integrate(lambda x: x, [1.0], -1.0)
    tr = integrate(lambda x: x, [1.0], 0.0)
    assert tr.final_state[0] == 1.0 and tr.final_time == 0.0


@settings(max_examples=20)
@given(st.floats(-3, 3), st.floats(0.1, 3.0), st.floats(0.0, 2.0))
def test_linear_scalar_property(x0, rate, T):
    tr = integrate(lambda x: -rate * x, [x0], T, 1e-10)
    assert abs(tr.final_state[0] - x0 * math.exp(-rate * T)) <= 1e-8 * (1 + abs(x0))
