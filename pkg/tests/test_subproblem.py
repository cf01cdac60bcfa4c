import dataclasses

import clarabel
import numpy as np
import pytest
from scipy import sparse

from rnmpc.subproblem import (AdmmSettings, ConvexSubproblem, build, check_solution, dump_triplets,
                              solve_alternating, solve_generic, solve_nominal, solve_structured)
from rnmpc.tube import Plan

from _instances import random_subproblem


def _nominal_instance(T=2, x0=1.0):
    """Scalar integrator with no disturbance, no correction and loose bounds."""
    H = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]) / 100.0
    return ConvexSubproblem(A=np.ones((T, 1, 1)), B=np.ones((T, 1, 1)), c=np.zeros((T, 1)),
                            x0=np.array([x0]), z_ref=np.zeros((T + 1, 1)), v_ref=np.zeros((T, 1)),
                            H=H, b=-np.ones(4), Hf=None, bf=None, e=np.zeros((T, 1)),
                            mu=np.zeros(1), Q=np.eye(1), R=np.eye(1), P=np.eye(1),
                            psi_free=False, terminal_eq=False)


def _lq_oracle(sp_):
    """Equality-constrained LQ problem solved through its KKT system."""
    T, n, m = sp_.T, sp_.n, sp_.m
    nz, nv = (T + 1) * n, T * m
    N = nz + nv
    Hq = np.zeros((N, N))
    for k in range(T):
        Hq[k * n:(k + 1) * n, k * n:(k + 1) * n] = 2 * sp_.Q
        Hq[nz + k * m:nz + (k + 1) * m, nz + k * m:nz + (k + 1) * m] = 2 * sp_.R
    Hq[T * n:, T * n:][:n, :n] = 2 * sp_.P
    rows, rhs = [], []
    r0 = np.zeros((n, N))
    r0[:, :n] = np.eye(n)
    rows.append(r0)
    rhs.append(sp_.x0)
    for k in range(T):
        r = np.zeros((n, N))
        r[:, (k + 1) * n:(k + 2) * n] = np.eye(n)
        r[:, k * n:(k + 1) * n] = -sp_.A[k]
        r[:, nz + k * m:nz + (k + 1) * m] = -sp_.B[k]
        rows.append(r)
        rhs.append(sp_.c[k])
    Aeq = np.vstack(rows)
    K = np.block([[Hq, Aeq.T], [Aeq, np.zeros((Aeq.shape[0], Aeq.shape[0]))]])
    sol = np.linalg.solve(K, np.concatenate([np.zeros(N), np.concatenate(rhs)]))
    z = sol[:nz].reshape(T + 1, n)
    v = sol[nz:N].reshape(T, m)
    return z, v, 0.5 * sol[:N] @ Hq @ sol[:N]


class TestExactBackends:
    def test_hand_solved_two_step_instance(self):
        sp_ = _nominal_instance()
        for sol in (solve_generic(sp_), solve_structured(sp_)):
            assert sol.status == "optimal"
            np.testing.assert_allclose(sol.z[:, 0], [1.0, 0.4, 0.2], atol=1e-6)
            np.testing.assert_allclose(sol.v[:, 0], [-0.6, -0.2], atol=1e-6)
            assert sol.objective == pytest.approx(1.6, abs=1e-7)

    @pytest.mark.parametrize("seed", range(3))
    def test_zero_disturbance_matches_lq_oracle(self, seed):
        rng = np.random.default_rng(seed)
        T, n, m = 6, 3, 2
        base = random_subproblem(seed, T=T, n=n, m=m, terminal=False)
        H = np.vstack([np.eye(n + m), -np.eye(n + m)]) / 100.0
        sp_ = dataclasses.replace(base, e=np.zeros((T, n)), mu=np.zeros(n), H=H, b=-np.ones(H.shape[0]),
                                  psi_free=False, terminal_eq=False, x0=rng.uniform(-1, 1, n))
        z, v, J = _lq_oracle(sp_)
        for solver in (solve_generic, solve_structured, solve_alternating):
            sol = solver(sp_)
            assert sol.status == "optimal"
            np.testing.assert_allclose(sol.z, z, atol=1e-6)
            np.testing.assert_allclose(sol.v, v, atol=1e-6)
            np.testing.assert_array_equal(sol.Phi.Phi_u, 0.0)
            assert sol.objective == pytest.approx(J, rel=1e-6, abs=1e-9)
        nom = solve_nominal(sp_)
        np.testing.assert_allclose(nom.z, z, atol=1e-6)

    @pytest.mark.parametrize("seed", range(4))
    def test_generic_and_structured_agree(self, seed):
        sp_ = random_subproblem(seed, box=0.4)
        g = solve_generic(sp_)
        s = solve_structured(sp_)
        assert g.status == s.status == "optimal"
        assert abs(s.objective - g.objective) <= 1e-5 * (1 + abs(g.objective))
        for sol in (g, s):
            rep = check_solution(sp_, sol)
            assert rep.passed, rep.failures

    def test_infeasible_tightening_reported(self):
        sp_ = random_subproblem(0)
        bad = dataclasses.replace(sp_, e=np.full_like(sp_.e, 2.0))
        assert solve_generic(bad).status == "infeasible"
        assert solve_alternating(bad).status == "infeasible"
        assert solve_structured(bad, AdmmSettings(max_iter=500)).status == "infeasible"

    def test_solver_cache_reuse_matches_fresh_build(self):
        a = solve_generic(random_subproblem(7), reuse=True)
        b = solve_generic(random_subproblem(8), reuse=True)
        fresh = solve_generic(random_subproblem(8), reuse=False)
        assert a.status == b.status == fresh.status == "optimal"
        assert b.objective == pytest.approx(fresh.objective, rel=1e-8)
        np.testing.assert_allclose(b.z, fresh.z, atol=1e-7)


class TestAlternating:
    @pytest.mark.parametrize("seed", range(4))
    def test_iterates_are_feasible_and_near_optimal(self, seed):
        sp_ = random_subproblem(seed, box=0.4)
        alt = solve_alternating(sp_)
        ref = solve_generic(sp_)
        assert alt.status == "optimal"
        assert check_solution(sp_, alt).passed
        # heuristic: never better than the optimum, and close to it
        assert alt.objective >= ref.objective - 1e-7 * (1 + abs(ref.objective))
        assert alt.objective <= ref.objective * 1.2 + 1e-6


class TestBuild:
    def test_zero_deviation_point_feasible_for_feasible_plan(self, scalar, scalar_plan):
        sp_ = build(scalar_plan, scalar.m, scalar.err, scalar.C, scalar.cost, np.array([0.5]), scalar.ti)
        sol = solve_generic(sp_)
        assert sol.status == "optimal"
        # warm start at the optimum: the new plan stays put
        assert np.abs(sol.z - scalar_plan.z).max() < 1e-5
        assert check_solution(sp_, sol).passed

    def test_linear_model_is_exact(self, scalar):
        from _instances import linear_model
        from rnmpc.model import error_bound
        m = linear_model([[1.1]], [[0.5]], [[0.01]])
        err = error_bound(m, 0.0)
        ref = Plan.zeros(5, 1, 1)
        sp_ = build(ref, m, err, scalar.C, scalar.cost, np.array([0.3]), None)
        sol = solve_generic(sp_)
        # the nominal trajectory satisfies the true dynamics after one solve
        np.testing.assert_allclose(sol.z[1:, 0], 1.1 * sol.z[:-1, 0] + 0.5 * sol.v[:, 0], atol=1e-8)


def _read_triplets(path):
    with open(path) as fh:
        lines = [ln.split() for ln in fh if not ln.startswith("#")]
    it = iter(lines)
    n = int(next(it)[1])
    mrows = int(next(it)[1])
    mats = {}
    for name, shape in (("P", (n, n)), ("A", (mrows, n))):
        hdr = next(it)
        assert hdr[0] == name
        trip = [next(it) for _ in range(int(hdr[1]))]
        r = [int(t[0]) for t in trip]
        c = [int(t[1]) for t in trip]
        v = [float(t[2]) for t in trip]
        mats[name] = sparse.csc_matrix((v, (r, c)), shape=shape)
    vecs = {}
    for name in ("q", "b"):
        hdr = next(it)
        vecs[name] = np.array([float(next(it)[0]) for _ in range(int(hdr[1]))])
    cones = next(it)
    return mats["P"], vecs["q"], mats["A"], vecs["b"], int(cones[2]), int(cones[4]), int(cones[6])


def test_dump_triplets_resolves_to_same_optimum(tmp_path):
    sp_ = random_subproblem(3, box=0.5)
    path = tmp_path / "sp.txt"
    dump_triplets(sp_, path)
    P, q, A, b, nz, nn, nsoc = _read_triplets(path)
    cones = [clarabel.ZeroConeT(nz), clarabel.NonnegativeConeT(nn)] + [clarabel.SecondOrderConeT(3)] * nsoc
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    res = clarabel.DefaultSolver(P, q, A, b, cones, settings).solve()
    ref = solve_generic(sp_)
    assert str(res.status).endswith("Solved")
    assert res.obj_val + _const(path) == pytest.approx(ref.info["solver_objective"], rel=1e-6, abs=1e-8)


def _const(path):
    with open(path) as fh:
        head = fh.readline()
    return float(head.split("q'x + ", 1)[1].split(" s.t.")[0])
