import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rnmpc.polytope import ConstraintSet, TerminalIngredients
from rnmpc.sim import feedback_rollout
from rnmpc.tube import (Plan, SystemResponse, causal_mask, check_plan, propagate_phi, propagate_psi,
                        reachable_input, reachable_state, rollout_error_system, shift_plan,
                        tau_norm, tau_norms, terminal_tightened_value, tightened_value,
                        tightened_values)


def _random_plan(seed, T=3, n=2, m=1, scale=0.3):
    rng = np.random.default_rng(seed)
    A = np.eye(n) + 0.2 * rng.standard_normal((T, n, n))
    B = rng.standard_normal((T, n, m))
    sig = rng.uniform(0.05, 0.3, (T, n))
    Pu = scale * rng.standard_normal((T, T, m, n))
    Phi = propagate_phi(A, B, sig, Pu)
    z = rng.standard_normal((T + 1, n))
    v = rng.standard_normal((T, m))
    psi_x = 0.1 * rng.standard_normal((T + 1, n))
    psi_u = 0.1 * rng.standard_normal((T, m))
    return Plan(z, v, psi_x, psi_u, Phi, np.ones(T)), A, B, sig


def _transition(A, k, i):
    """``A_{k-1} ... A_i`` (identity when ``k == i``)."""
    M = np.eye(A.shape[1])
    for s in range(i, k):
        M = A[s] @ M
    return M


class TestPropagatePhi:
    def test_identity_accumulates(self):
        T, n = 4, 2
        A = np.broadcast_to(np.eye(n), (T, n, n))
        Phi = propagate_phi(A, np.zeros((T, n, 1)), np.ones((T, n)), np.zeros((T, T, 1, n)))
        for k in range(1, T + 1):
            for j in range(k):
                np.testing.assert_array_equal(Phi.Phi_x[k, j], np.eye(n))
        assert Phi.is_causal()

    def test_deadbeat_cancels(self):
        T = 5
        A = np.full((T, 1, 1), 0.5)
        B = np.ones((T, 1, 1))
        sig = np.ones((T, 1))
        # build Phi_u column by column so that Phi_u[k, j] = -0.5 Phi_x[k, j]
        Pu = np.zeros((T, T, 1, 1))
        for k in range(1, T):
            Phi = propagate_phi(A, B, sig, Pu)
            Pu[k, :k] = -0.5 * Phi.Phi_x[k, :k]
        Phi = propagate_phi(A, B, sig, Pu)
        for k in range(2, T + 1):
            for j in range(k - 1):
                assert Phi.Phi_x[k, j, 0, 0] == 0.0

    def test_random_ltv_matches_dense_products(self):
        rng = np.random.default_rng(1)
        T, n, m = 5, 2, 1
        A = rng.standard_normal((T, n, n))
        B = rng.standard_normal((T, n, m))
        sig = rng.uniform(0.1, 1, (T, n))
        Pu = rng.standard_normal((T, T, m, n)) * causal_mask(T)[:, :, None, None]
        Phi = propagate_phi(A, B, sig, Pu)
        for k in range(1, T + 1):
            for j in range(k):
                want = _transition(A, k, j + 1) @ np.diag(sig[j])
                for i in range(j + 1, k):
                    want = want + _transition(A, k, i + 1) @ B[i] @ Pu[i, j]
                np.testing.assert_allclose(Phi.Phi_x[k, j], want, rtol=1e-12, atol=1e-12)

    def test_noncausal_input_blocks_are_masked(self):
        T, n = 3, 1
        Pu = np.ones((T, T, 1, n))
        Phi = propagate_phi(np.ones((T, n, n)), np.ones((T, n, 1)), np.ones((T, n)), Pu)
        assert Phi.is_causal()

    def test_psi_recursion(self):
        rng = np.random.default_rng(2)
        A = rng.standard_normal((3, 2, 2))
        B = rng.standard_normal((3, 2, 1))
        pu = rng.standard_normal((3, 1))
        px = propagate_psi(A, B, np.array([1.0, -1.0]), pu)
        for k in range(3):
            np.testing.assert_allclose(px[k + 1], A[k] @ px[k] + B[k] @ pu[k])


class TestReachableSets:
    def test_step_zero_is_singleton(self):
        plan, *_ = _random_plan(0)
        R = reachable_state(plan, 0)
        assert R.generators.shape[0] == 0
        lo, hi = R.interval_hull()
        np.testing.assert_array_equal(lo, hi)
        np.testing.assert_allclose(lo, plan.z[0] + plan.psi_x[0])
        assert R.contains(plan.z[0] + plan.psi_x[0])
        assert not R.contains(plan.z[0] + plan.psi_x[0] + 1e-3)

    def test_step_one_is_sigma_box(self):
        plan, A, B, sig = _random_plan(1)
        lo, hi = reachable_state(plan, 1).interval_hull()
        c = plan.z[1] + plan.psi_x[1]
        np.testing.assert_allclose(lo, c - sig[0])
        np.testing.assert_allclose(hi, c + sig[0])

    def test_out_of_range(self):
        plan, *_ = _random_plan(2)
        with pytest.raises(IndexError):
            reachable_state(plan, plan.T + 1)
        with pytest.raises(IndexError):
            reachable_input(plan, plan.T)
        with pytest.raises(IndexError):
            tightened_value(plan, ConstraintSet.from_box([1.0, 1.0], [1.0]), 0, plan.T)

    def test_support_and_contains_agree_with_samples(self):
        plan, *_ = _random_plan(3)
        rng = np.random.default_rng(0)
        for k in range(1, plan.T + 1):
            R = reachable_state(plan, k)
            for _ in range(20):
                w = rng.choice([-1.0, 1.0], size=(k, plan.n_x))
                p = R.center + np.einsum("jab,jb->a", R.generators, w)
                assert R.contains(p)
                d = rng.standard_normal(plan.n_x)
                assert d @ p <= R.support(d) + 1e-12
            lo, hi = R.interval_hull()
            assert not R.contains(hi + 1e-3)

    def test_monte_carlo_error_system_stays_inside(self):
        plan, A, B, _ = _random_plan(4, T=4)
        rng = np.random.default_rng(5)
        for _ in range(1000):
            w = rng.uniform(-1, 1, (plan.T, plan.n_x))
            xs, us = rollout_error_system(plan, A, B, w)
            for k in range(plan.T + 1):
                lo, hi = reachable_state(plan, k).interval_hull()
                assert np.all(xs[k] >= lo - 1e-12) and np.all(xs[k] <= hi + 1e-12)
            for k in range(plan.T):
                lo, hi = reachable_input(plan, k).interval_hull()
                assert np.all(us[k] >= lo - 1e-12) and np.all(us[k] <= hi + 1e-12)


def test_true_system_stays_in_predicted_tubes(scalar, scalar_plan):
    """Nonlinear scalar system under the plan's disturbance feedback."""
    plan = scalar_plan
    rng = np.random.default_rng(11)
    escapes = 0
    for trial in range(1000):
        if trial % 2:
            w = rng.choice([-1.0, 1.0], size=(plan.T, 1))
        else:
            w = rng.uniform(-1, 1, (plan.T, 1))
        xs, us, wr = feedback_rollout(plan, scalar.m, np.array([0.5]), w)
        escapes += int(np.abs(wr).max() > 1 + 1e-9)
        for k in range(plan.T + 1):
            lo, hi = reachable_state(plan, k).interval_hull()
            escapes += int(xs[k, 0] < lo[0] - 1e-9 or xs[k, 0] > hi[0] + 1e-9)
        for k in range(plan.T):
            lo, hi = reachable_input(plan, k).interval_hull()
            escapes += int(us[k, 0] < lo[0] - 1e-9 or us[k, 0] > hi[0] + 1e-9)
        assert np.all(scalar.C.contains_many(np.hstack([xs[:-1], us]), tol=1e-6))
    assert escapes == 0


class TestTightening:
    def test_zero_response_is_nominal(self):
        T, n, m = 3, 2, 1
        rng = np.random.default_rng(0)
        plan = Plan(rng.standard_normal((T + 1, n)), rng.standard_normal((T, m)), np.zeros((T + 1, n)),
                    np.zeros((T, m)), SystemResponse.zeros(T, n, m), np.zeros(T))
        C = ConstraintSet.from_box([1.0, 2.0], [3.0])
        for k in range(T):
            y = np.concatenate([plan.z[k], plan.v[k]])
            np.testing.assert_allclose([tightened_value(plan, C, i, k) for i in range(C.n_c)],
                                       C.values(y))

    def test_single_generator_adds_its_width(self):
        T, n, m = 2, 2, 1
        Phi = SystemResponse.zeros(T, n, m)
        Phi.Phi_x[1, 0] = np.diag([0.2, 0.2])
        plan = Plan(np.zeros((T + 1, n)), np.zeros((T, m)), np.zeros((T + 1, n)), np.zeros((T, m)),
                    Phi, np.full(T, 0.2))
        C = ConstraintSet.from_box([1.0, 1.0], [1.0])
        assert tightened_value(plan, C, 0, 1) == pytest.approx(-1.0 + 0.2)
        assert tau_norm(plan, 1) == pytest.approx(0.2)

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_vertex_enumeration(self, seed):
        T = 3
        plan, *_ = _random_plan(seed, T=T, n=2, m=1)
        rng = np.random.default_rng(100 + seed)
        H = rng.standard_normal((3, 3))
        C = ConstraintSet(np.vstack([H, np.eye(3), -np.eye(3)]), -np.full(9, 50.0), 2)
        S = plan.Phi.stacked()
        for k in range(1, T):
            center = np.concatenate([plan.z[k] + plan.psi_x[k], plan.v[k] + plan.psi_u[k]])
            for i in range(C.n_c):
                best = -np.inf
                for signs in itertools.product([-1.0, 1.0], repeat=2 * k):
                    w = np.array(signs).reshape(k, 2)
                    y = center + np.einsum("jab,jb->a", S[k, :k], w)
                    best = max(best, C.H[i] @ y + C.b[i])
                assert tightened_value(plan, C, i, k) == pytest.approx(best, rel=1e-12, abs=1e-12)

    @pytest.mark.parametrize("seed", range(4))
    def test_terminal_matches_vertex_enumeration(self, seed):
        T = 3
        plan, *_ = _random_plan(seed, T=T, n=2, m=1)
        rng = np.random.default_rng(200 + seed)
        Hf = np.vstack([rng.standard_normal((2, 2)), np.eye(2), -np.eye(2)])
        X_f = ConstraintSet(Hf, -np.full(6, 5.0), 2)
        ti = TerminalIngredients(X_f, np.zeros((1, 2)), np.eye(2), np.zeros(2), 1.0, np.eye(2))
        center = plan.z[T] + plan.psi_x[T]
        for i in range(X_f.n_c):
            best = max(Hf[i] @ (center + np.einsum("jab,jb->a", plan.Phi.Phi_x[T], np.array(s).reshape(T, 2)))
                       for s in itertools.product([-1.0, 1.0], repeat=2 * T)) + X_f.b[i]
            assert terminal_tightened_value(plan, ti, i) == pytest.approx(best, rel=1e-12, abs=1e-12)

    def test_terminal_trivial_cases(self):
        T, n, m = 2, 1, 1
        X_f = ConstraintSet.from_box([0.3])
        ti = TerminalIngredients(X_f, np.zeros((1, 1)), np.eye(1), np.zeros(1), 1.0, np.eye(1))
        base = Plan(np.zeros((T + 1, n)), np.zeros((T, m)), np.zeros((T + 1, n)), np.zeros((T, m)),
                    SystemResponse.zeros(T, n, m), np.zeros(T))
        assert terminal_tightened_value(base, ti, 0) == pytest.approx(-0.3)
        px = np.zeros((T + 1, n))
        px[T] = 0.3
        on_face = base.with_(psi_x=px)
        assert terminal_tightened_value(on_face, ti, 0) == pytest.approx(0.0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.floats(1.0, 5.0))
    def test_scaling_responses_never_loosens(self, seed, alpha):
        plan, *_ = _random_plan(seed)
        C = ConstraintSet.from_box([1.0, 1.0], [1.0])
        big = plan.with_(Phi=SystemResponse(alpha * plan.Phi.Phi_x, alpha * plan.Phi.Phi_u))
        assert np.all(tightened_values(big, C.H, C.b) >= tightened_values(plan, C.H, C.b) - 1e-12)


class TestTauNorm:
    def test_zeros(self):
        plan = Plan.zeros(3, 2, 1)
        np.testing.assert_array_equal(tau_norms(plan), 0.0)

    def test_single_block(self):
        T, n, m = 2, 2, 1
        Phi = SystemResponse.zeros(T, n, m)
        Phi.Phi_x[1, 0] = np.diag([0.3, 0.3])
        plan = Plan(np.zeros((T + 1, n)), np.zeros((T, m)), np.zeros((T + 1, n)), np.zeros((T, m)),
                    Phi, np.zeros(T))
        assert tau_norm(plan, 0) == 0.0
        assert tau_norm(plan, 1) == pytest.approx(0.3)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_random_blocks_match_row_sums(self, seed):
        plan, *_ = _random_plan(seed, T=4, n=2, m=2)
        for k in range(plan.T):
            rows = []
            for r in range(plan.n_x):
                rows.append(sum(np.abs(plan.Phi.Phi_x[k, j, r]).sum() for j in range(k))
                            + abs(plan.psi_x[k, r]))
            for r in range(plan.n_u):
                rows.append(sum(np.abs(plan.Phi.Phi_u[k, j, r]).sum() for j in range(k))
                            + abs(plan.psi_u[k, r]))
            assert tau_norm(plan, k) == pytest.approx(max(rows), rel=1e-12)


class TestPlan:
    def test_json_round_trip(self, scalar_plan):
        back = Plan.from_json(scalar_plan.to_json())
        for name in ("z", "v", "psi_x", "psi_u", "tau"):
            np.testing.assert_array_equal(getattr(back, name), getattr(scalar_plan, name))
        np.testing.assert_array_equal(back.Phi.Phi_x, scalar_plan.Phi.Phi_x)
        np.testing.assert_array_equal(back.Phi.Phi_u, scalar_plan.Phi.Phi_u)

    def test_optimal_plan_passes_all_invariants(self, scalar, scalar_plan):
        rep = check_plan(scalar_plan, scalar.m, scalar.err, scalar.C, scalar.ti, x=np.array([0.5]),
                         exact_sigma=True)
        assert rep.passed, rep.failures
        assert rep.residuals["nominal_dynamics"] <= 1e-8
        assert rep.residuals["phi_recursion"] <= 1e-8

    def test_halved_tau_fails(self, scalar, scalar_plan):
        bad = scalar_plan.with_(tau=0.5 * scalar_plan.tau)
        rep = check_plan(bad, scalar.m, scalar.err, scalar.C, scalar.ti)
        assert not rep.passed

    def test_shift_of_zero_plan_is_zero(self):
        z = Plan.zeros(4, 2, 1)
        sh = shift_plan(z, np.zeros(2), np.zeros((1, 2)), np.eye(2), np.zeros(2), 0.0)
        for name in ("z", "v", "psi_x", "psi_u", "tau"):
            np.testing.assert_array_equal(getattr(sh, name), 0.0)
        np.testing.assert_array_equal(sh.Phi.Phi_x, 0.0)
