import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rnmpc import systems
from rnmpc.model import (DimensionError, error_bound, estimate_curvature, jacobians,
                         jacobians_along, sigma, simulate_nominal, step)
from rnmpc.polytope import ConstraintSet, bounding_box

from _instances import linear_model


def _central_fd(m, z, v, h=1e-6):
    n, nu = m.n_x, m.n_u
    A = np.empty((n, n))
    B = np.empty((n, nu))
    for i in range(n):
        d = np.zeros(n)
        d[i] = h
        A[:, i] = (np.real(m.f(z + d, v)) - np.real(m.f(z - d, v))) / (2 * h)
    for i in range(nu):
        d = np.zeros(nu)
        d[i] = h
        B[:, i] = (np.real(m.f(z, v + d)) - np.real(m.f(z, v - d))) / (2 * h)
    return A, B


def _cartpole_rk4_scalar(x, u, w, p):
    """Independent scalar re-implementation of the discretised cart-pole."""
    M, mp, l, g, us, dt = p["M"], p["m"], p["l"], p["g"], p["u_scale"], p["dt"]

    def fc(s):
        _, pd, th, thd = s
        sn, cs = math.sin(th), math.cos(th)
        pdd = (us * u + mp * sn * (l * thd * thd - g * cs)) / (M + mp * sn * sn)
        thdd = (g * sn - pdd * cs) / l
        return [pd, pdd, thd, thdd]

    def axpy(a, s, k):
        return [si + a * ki for si, ki in zip(s, k)]

    k1 = fc(x)
    k2 = fc(axpy(dt / 2, x, k1))
    k3 = fc(axpy(dt / 2, x, k2))
    k4 = fc(axpy(dt, x, k3))
    out = [x[i] + dt / 6 * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i]) for i in range(4)]
    return [o + e * wi for o, e, wi in zip(out, p["e_diag"], w)]


class TestStep:
    def test_double_integrator_origin_is_fixed_point(self):
        m = systems.load_model("double_integrator")
        np.testing.assert_array_equal(step(m, np.zeros(2), np.zeros(1), np.zeros(2)), np.zeros(2))

    def test_double_integrator_zero_velocity_does_not_drift(self):
        m = systems.load_model("double_integrator")
        np.testing.assert_allclose(step(m, np.array([1.0, 0.0]), np.zeros(1), np.zeros(2)), [1.0, 0.0])

    def test_cartpole_matches_scalar_reimplementation(self):
        m = systems.load_model("cartpole")
        x = [0.0, 0.0, 0.1, 0.0]
        w = [1.0, 0.0, 0.0, 0.0]
        got = step(m, np.array(x), np.array([1.0]), np.array(w))
        want = _cartpole_rk4_scalar(x, 1.0, w, dict(m.params))
        np.testing.assert_allclose(got, want, rtol=1e-13, atol=1e-15)

    def test_dimension_mismatch_raises(self):
        m = systems.load_model("double_integrator")
        with pytest.raises(DimensionError):
            step(m, np.zeros(3), np.zeros(1), np.zeros(2))
        with pytest.raises(DimensionError):
            step(m, np.zeros(2), np.zeros(2), np.zeros(2))

    def test_simulate_nominal_matches_repeated_step(self):
        m = systems.load_model("cartpole")
        v = np.linspace(-0.2, 0.2, 5)[:, None]
        z = simulate_nominal(m, np.array([0.0, 0.1, 0.05, 0.0]), v)
        x = z[0]
        for k in range(5):
            x = step(m, x, v[k], np.zeros(4))
            np.testing.assert_allclose(z[k + 1], x, atol=1e-14)


class TestJacobians:
    def test_linear_model_exact(self):
        A = np.array([[1.0, 0.2], [-0.3, 0.9]])
        B = np.array([[0.0], [0.5]])
        lin = jacobians(linear_model(A, B, 0.1 * np.eye(2)), np.array([0.3, -1.0]), np.array([2.0]))
        np.testing.assert_array_equal(lin.A, A)
        np.testing.assert_array_equal(lin.B, B)

    def test_cartpole_origin_matches_finite_differences(self):
        m = systems.load_model("cartpole")
        lin = jacobians(m, np.zeros(4), np.zeros(1))
        A, B = _central_fd(m, np.zeros(4), np.zeros(1))
        np.testing.assert_allclose(lin.A, A, rtol=1e-5, atol=1e-8)
        np.testing.assert_allclose(lin.B, B, rtol=1e-5, atol=1e-8)
        # upright pendulum: angle feeds back positively into its own rate
        assert lin.A[3, 2] > 0

    def test_rocket_hover_matches_finite_differences(self):
        m = systems.load_model("rocket17")
        lin = jacobians(m, np.zeros(17), np.zeros(4))
        A, B = _central_fd(m, np.zeros(17), np.zeros(4))
        np.testing.assert_allclose(lin.A, A, rtol=1e-5, atol=1e-8)
        np.testing.assert_allclose(lin.B, B, rtol=1e-5, atol=1e-8)

    @pytest.mark.parametrize("name", systems.REGISTRY)
    def test_random_points_in_constraint_set(self, name):
        m = systems.load_model(name)
        C = systems.default_constraints(name)
        rng = np.random.default_rng(3)
        lo, hi = bounding_box(C)
        Y = rng.uniform(lo, hi, size=(100, lo.size))
        Y = Y[C.contains_many(Y)]
        Z, V = Y[:, :m.n_x], Y[:, m.n_x:]
        A_all, B_all = jacobians_along(m, Z, V)
        for k in range(Y.shape[0]):
            A, B = _central_fd(m, Z[k], V[k])
            scale_a = max(1.0, np.abs(A).max())
            scale_b = max(1.0, np.abs(B).max())
            assert np.abs(A_all[k] - A).max() <= 1e-5 * scale_a
            assert np.abs(B_all[k] - B).max() <= 1e-5 * scale_b


class TestCurvature:
    def test_linear_model_has_zero_curvature(self):
        m = linear_model([[1.0, 0.1], [0.0, 1.0]], [[0.0], [0.1]], 0.01 * np.eye(2))
        C = ConstraintSet.from_box([1.0, 1.0], [1.0])
        est = estimate_curvature(m, C, n_samples=500, seed=0)
        np.testing.assert_array_equal(est.mu, np.zeros(2))

    def test_scalar_quadratic_converges_to_dt(self):
        m = systems.load_model("scalar_quadratic")
        C = ConstraintSet.from_box([1.0], [1.0])
        est = estimate_curvature(m, C, n_samples=10_000, seed=0)
        assert abs(est.mu[0] - m.dt) <= 0.05 * m.dt
        assert est.converged()

    def test_cartpole_seeds_agree_and_match_stored(self):
        m = systems.load_model("cartpole")
        C = systems.default_constraints("cartpole")
        a = estimate_curvature(m, C, n_samples=4000, seed=0).mu
        b = estimate_curvature(m, C, n_samples=4000, seed=1).mu
        np.testing.assert_allclose(a, b, rtol=0.10)
        stored = np.asarray(systems.model_entry("cartpole")["mu"]) / systems.model_entry("cartpole")["mu_margin"]
        np.testing.assert_allclose(a, stored, rtol=0.10)

    def test_same_seed_is_deterministic(self):
        m = systems.load_model("cartpole")
        C = systems.default_constraints("cartpole")
        a = estimate_curvature(m, C, n_samples=300, seed=5).mu
        b = estimate_curvature(m, C, n_samples=300, seed=5).mu
        np.testing.assert_array_equal(a, b)

    def test_unbounded_set_raises(self):
        m = systems.load_model("scalar_quadratic")
        C = ConstraintSet(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([-1.0, -1.0]), 1,
                          check_bounded=False)
        with pytest.raises(ValueError):
            estimate_curvature(m, C, n_samples=10)

    def test_zero_samples_raises(self):
        m = systems.load_model("scalar_quadratic")
        with pytest.raises(ValueError):
            estimate_curvature(m, ConstraintSet.from_box([1.0], [1.0]), n_samples=0)


class TestSigma:
    def test_zero_curvature_gives_row_sums(self):
        m = linear_model(np.eye(3), np.ones((3, 1)), 0.1 * np.eye(3))
        p = error_bound(m, 0.0)
        for tau in (0.0, 0.5, 3.0):
            np.testing.assert_allclose(sigma(p, m, np.zeros(3), np.zeros(1), tau), 0.1)

    def test_direct_formula(self):
        m = linear_model(np.eye(2), np.ones((2, 1)), np.eye(2))
        p = error_bound(m, [1.0, 2.0])
        np.testing.assert_allclose(sigma(p, m, np.zeros(2), np.zeros(1), 0.5), [1.25, 1.5])

    def test_negative_tau_raises(self):
        m = linear_model(np.eye(1), np.ones((1, 1)), np.eye(1))
        with pytest.raises(ValueError):
            sigma(error_bound(m, 1.0), m, np.zeros(1), np.zeros(1), -0.1)

    def test_negative_curvature_rejected(self):
        m = linear_model(np.eye(1), np.ones((1, 1)), np.eye(1))
        with pytest.raises(ValueError):
            error_bound(m, -1.0)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.just(0.0) | st.floats(1e-3, 10), min_size=3, max_size=3),
           st.lists(st.floats(-2, 2), min_size=9, max_size=9),
           st.floats(0, 5), st.floats(0, 5))
    def test_random_matches_recomputation_and_is_monotone(self, mu, E, t1, t2):
        E = np.array(E).reshape(3, 3)
        m = linear_model(np.eye(3), np.ones((3, 1)), E)
        p = error_bound(m, mu)
        s1 = sigma(p, m, np.zeros(3), np.zeros(1), t1)
        want = t1 ** 2 * np.array(mu) + np.abs(E).sum(axis=1)
        np.testing.assert_allclose(s1, want, rtol=1e-12, atol=1e-12)
        lo, hi = sorted((t1, t2))
        assert np.all(sigma(p, m, np.zeros(3), np.zeros(1), lo) <= sigma(p, m, np.zeros(3), np.zeros(1), hi))
        if lo < hi:
            pos = np.array(mu) > 0
            assert np.all(sigma(p, m, np.zeros(3), np.zeros(1), lo)[pos]
                          < sigma(p, m, np.zeros(3), np.zeros(1), hi)[pos]) or hi - lo < 1e-6


def test_error_bound_validity_on_scalar_model():
    m = systems.load_model("scalar_quadratic")
    p = error_bound(m, m.dt)
    rng = np.random.default_rng(0)
    N = 10_000
    fails = 0
    for _ in range(N):
        tau = rng.uniform(0, 1)
        zv = rng.uniform(-1, 1, 2)
        d = rng.uniform(-tau, tau, 2)
        xu = np.clip(zv + d, -1, 1)
        d = xu - zv
        w = rng.uniform(-1, 1, 1)
        lin = jacobians(m, zv[:1], zv[1:])
        approx = np.real(m.f(zv[:1], zv[1:])) + lin.A @ d[:1] + lin.B @ d[1:]
        true = step(m, xu[:1], xu[1:], w)
        fails += int(np.any(np.abs(approx - true) > sigma(p, m, zv[:1], zv[1:], tau) + 1e-12))
    assert fails == 0


@pytest.mark.parametrize("name", systems.REGISTRY)
def test_bundled_models_have_square_disturbance_maps(name):
    m = systems.load_model(name)
    E = np.asarray(m.E(np.zeros(m.n_x), np.zeros(m.n_u)))
    assert E.shape == (m.n_x, m.n_x)
    assert np.all(np.diag(E) > 0)
    x1 = step(m, np.zeros(m.n_x), np.zeros(m.n_u), np.ones(m.n_x))
    assert x1.shape == (m.n_x,) and np.all(np.isfinite(x1))
