"""Receding-horizon driver: sequential convex programming and the control law.

Each call to :meth:`RmpcController.solve` linearises around a warm start,
solves the convex subproblem, moves the linearisation point to the solution
and repeats (``full_scp``) or stops after one pass (``rti``).  The final
iterate is then *polished*: the nominal trajectory is re-simulated through
the true dynamics, the responses are re-propagated at the exact Jacobians
with the exact error bound, and the result is checked against every plan
invariant.  :meth:`RmpcController.step` adds the closed-loop logic: the
shifted candidate of the previous plan seeds the solve and is applied when
the fresh plan cannot be certified.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_discrete_are

from .feasibility_oracle import (DegenerateBoundError, TubeEscapeError, build_candidate,
                                 check_candidate, plan_value)
from .model import ErrorBoundParams, Model, jacobians_along, simulate_nominal
from .polytope import ConstraintSet, CostSpec, TerminalIngredients
from .subproblem import (AdmmSettings, AlternationSettings, build, consistent_responses,
                         solve_alternating, solve_generic, solve_nominal, solve_structured)
from .tube import Plan, PlanReport, SystemResponse, check_plan, propagate_psi, shift_plan

MODES = ("full_scp", "rti")
BACKENDS = ("generic", "structured", "alternating")


@dataclass(frozen=True)
class ScpConfig:
    """Controller settings.

    ``trust`` enables a box trust region on nominal deviations in
    ``full_scp`` mode, adapted by a ratio test.  ``simplified`` drops the
    curvature term, the terminal ingredients and ``psi``.  The loop stops
    when the nominal step is below ``step_tol``, or when the subproblem
    objective changes by less than ``obj_tol`` (relative) between iterations
    and the polished plan passes the checks.
    """

    T: int = 10
    mode: str = "full_scp"
    backend: str = "generic"
    max_iter: int = 15
    step_tol: float = 1e-6
    obj_tol: float = 1e-6
    rho_reg: float = 1e-3
    trust: float | None = None
    simplified: bool = False
    backoff: float = 0.0
    fallback: bool = True
    cold_iters: int = 30
    admm: AdmmSettings = field(default_factory=AdmmSettings)
    alternation: AlternationSettings = field(default_factory=AlternationSettings)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.T < 1:
            raise ValueError("horizon must be positive")


@dataclass
class ControlResult:
    """Applied input, the plan it came from and per-iteration diagnostics.

    ``status`` is ``optimal`` (converged and certified), ``feasible``
    (certified, not converged), ``candidate`` (shifted previous plan applied),
    ``uncertified`` (plan fails a check; only in simplified mode or without
    fallback) or ``infeasible``.
    """

    u: np.ndarray
    plan: Plan | None
    status: str
    objective: float
    value: float
    iterations: int
    diagnostics: list = field(default_factory=list)
    report: PlanReport | None = None
    source: str = "scp"
    timings: dict = field(default_factory=dict)

    @property
    def feasible(self) -> bool:
        return self.status in ("optimal", "feasible", "candidate")


def terminal_weight(m: Model, cost: CostSpec, discount: float = 1.0) -> np.ndarray:
    """Riccati terminal weight at the origin, optionally discounted.

    A discount below one keeps the Riccati equation solvable when the
    linearisation has uncontrollable unit-modulus modes.
    """
    A, B = jacobians_along(m, np.zeros((1, m.n_x)), np.zeros((1, m.n_u)))
    g = np.sqrt(discount)
    P = solve_discrete_are(g * A[0], g * B[0], cost.Q, cost.R)
    return 0.5 * (P + P.T)


def shift_warm_start(prev: Plan, ti: TerminalIngredients | None = None,
                     m: Model | None = None, err: ErrorBoundParams | None = None) -> Plan:
    """Shift a plan one step with zero realised disturbance.

    With terminal ingredients the terminal controller is appended.  Without
    them (simplified mode) a zero input is appended, the state is extended
    through the nominal model and the new sub-diagonal block is the additive
    error bound.
    """
    if ti is not None:
        return shift_plan(prev, np.zeros(prev.n_x), ti.K_f, ti.A_cl, ti.Sigma_f, ti.tau_f)
    if m is None:
        raise ValueError("a model is required to shift without terminal ingredients")
    zT = prev.z[-1]
    u0 = np.zeros(prev.n_u)
    A, B = jacobians_along(m, zT[None], u0[None])
    z_next = np.real(m.f(zT, u0))
    e = err.e_rows(zT, u0) if err is not None else np.zeros(prev.n_x)
    return shift_plan(prev, np.zeros(prev.n_x), np.zeros((prev.n_u, prev.n_x)), A[0], e,
                      float(prev.tau[-1]), z_append=z_next)


class RmpcController:
    """Robust nonlinear MPC controller; one instance per control loop."""

    def __init__(self, m: Model, err: ErrorBoundParams, C: ConstraintSet, cost: CostSpec,
                 ti: TerminalIngredients | None = None, config: ScpConfig | None = None):
        self.config = config or ScpConfig()
        self.model = m
        self.C = C
        self.cost = cost
        if self.config.simplified:
            self.err = err.simplified()
            self.ti = None
        else:
            self.err = err
            self.ti = ti
        self.psi_free = not self.config.simplified
        self.P = ti.P if (self.ti is not None) else (cost.P if cost.P is not None else cost.Q)
        self._cost = CostSpec(cost.Q, cost.R, self.P)
        self.plan: Plan | None = None

    # -- helpers ---------------------------------------------------------
    def reset(self):
        self.plan = None

    def _build(self, ref: Plan, x, trust=None, robust=True):
        cfg = self.config
        err = self.err if robust else self.err.simplified()
        return build(ref, self.model, err, self.C, self._cost, x, self.ti,
                     rho_reg=cfg.rho_reg, trust=trust, psi_free=self.psi_free and robust,
                     backoff=cfg.backoff)

    def _solve_sp(self, sp_, warm_state=None):
        if self.config.backend == "structured":
            return solve_structured(sp_, self.config.admm, warm=warm_state)
        if self.config.backend == "alternating":
            ref = sp_.ref
            warm = ref if ref is not None and np.any(ref.Phi.Phi_u) else None
            return solve_alternating(sp_, self.config.alternation, warm=warm)
        return solve_generic(sp_)

    def polish(self, plan: Plan, x) -> Plan:
        """Re-simulate the nominal trajectory and re-propagate the tube exactly."""
        m = self.model
        T = plan.T
        x = np.asarray(x, dtype=float)
        z0 = plan.z[0] if self.psi_free else x
        z = simulate_nominal(m, z0, plan.v)
        if not np.all(np.isfinite(z)):
            raise FloatingPointError("non-finite state in nominal simulation")
        A, B = jacobians_along(m, z[:T], plan.v)
        if self.psi_free:
            psi_x = propagate_psi(A, B, x - z0, plan.psi_u)
            psi_u = plan.psi_u
        else:
            psi_x = np.zeros_like(plan.psi_x)
            psi_u = np.zeros_like(plan.psi_u)
        e = np.array([self.err.e_rows(z[k], plan.v[k]) for k in range(T)])
        psi = np.concatenate([psi_x[:T], psi_u], axis=1)
        Phi, tau, _ = consistent_responses(A, B, e, self.err.mu, plan.Phi.Phi_u,
                                           plan.tau, psi)
        return Plan(z, plan.v.copy(), psi_x, psi_u, Phi, tau, meta=dict(plan.meta))

    def check(self, plan: Plan, x) -> PlanReport:
        return check_plan(plan, self.model, self.err, self.C, self.ti, x=x,
                          terminal=self.ti is not None, exact_sigma=True)

    def true_objective(self, plan: Plan) -> float:
        y = plan.z + plan.psi_x
        w = plan.v + plan.psi_u
        T = plan.T
        J = np.einsum("ka,ab,kb->", y[:T], self.cost.Q, y[:T]) + \
            np.einsum("ka,ab,kb->", w, self.cost.R, w) + y[T] @ self.P @ y[T]
        J += self.config.rho_reg * (np.sum(plan.Phi.Phi_x ** 2) + np.sum(plan.Phi.Phi_u ** 2))
        return float(J)

    def value(self, plan: Plan) -> float:
        return plan_value(plan, self.cost.Q, self.cost.R, self.P)

    # -- cold start ------------------------------------------------------
    def cold_start(self, x) -> Plan:
        """Nominal-only problem solved to convergence (no responses, ``tau`` from the additive bound)."""
        m = self.model
        T = self.config.T
        x = np.asarray(x, dtype=float)
        z = x[None, :] * (1.0 - np.arange(T + 1) / T)[:, None]
        v = np.zeros((T, m.n_u))
        ref = Plan(z, v, np.zeros_like(z), np.zeros_like(v), SystemResponse.zeros(T, m.n_x, m.n_u),
                   np.zeros(T))
        for _ in range(self.config.cold_iters):
            sp_ = self._build(ref, x, robust=False)
            nom = solve_nominal(sp_)
            zz, vv = nom.z, nom.v
            if nom.status != "optimal":
                break
            step = max(np.abs(zz - ref.z).max(), np.abs(vv - ref.v).max())
            ref = ref.with_(z=zz, v=vv)
            if step <= self.config.step_tol:
                break
        return ref

    # -- main entry points -----------------------------------------------
    def solve(self, x, warm: Plan | None = None) -> ControlResult:
        """Run the SCP loop from ``warm`` (cold start when ``None``) and certify the result."""
        cfg = self.config
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError("non-finite state")
        t_start = time.perf_counter()
        ref = warm if warm is not None else self.cold_start(x)
        if ref.T != cfg.T or ref.n_x != self.model.n_x:
            raise ValueError("warm start does not match the controller dimensions")
        trust = cfg.trust if cfg.mode == "full_scp" else None
        ref_obj = None
        diags = []
        best = None
        converged = False
        warm_state = None
        prev_obj = None
        timings = {"jac": 0.0, "ricc": 0.0, "qp": 0.0}
        it = 0
        for it in range(1, cfg.max_iter + 1):
            sp_ = self._build(ref, x, trust=trust)
            sol = self._solve_sp(sp_, warm_state)
            for key in timings:
                timings[key] += sol.timings.get(key, 0.0)
            rec = {"iter": it, "status": sol.status, "objective": sol.objective,
                   "jac": sol.timings.get("jac", 0.0), "ricc": sol.timings.get("ricc", 0.0),
                   "qp": sol.timings.get("qp", 0.0), "trust": trust}
            if sol.status not in ("optimal", "max_iter"):
                rec["step"] = np.nan
                diags.append(rec)
                if best is None and trust is None:
                    break
                if trust is not None and trust > 1e-6:
                    trust *= 0.5
                    continue
                break
            cand = sol.to_plan()
            step = float(max(np.abs(cand.z - ref.z).max(), np.abs(cand.v - ref.v).max()))
            rec["step"] = step
            if trust is not None:
                # ratio test on the objective with exact re-propagation
                if ref_obj is None:
                    ref_obj = self.true_objective(self.polish(ref, x)) if best is not None else np.inf
                new_obj = self.true_objective(self.polish(cand, x))
                pred = ref_obj - sol.objective
                actual = ref_obj - new_obj
                ratio = actual / pred if np.isfinite(pred) and pred > 1e-12 else 1.0
                rec["ratio"] = float(ratio) if np.isfinite(ratio) else None
                if np.isfinite(ref_obj) and ratio < 0.1 and step > cfg.step_tol:
                    trust *= 0.5
                    rec["accepted"] = False
                    diags.append(rec)
                    if trust < 1e-8:
                        break
                    continue
                if ratio > 0.75:
                    trust *= 1.5
                ref_obj = new_obj
            rec["accepted"] = True
            diags.append(rec)
            if cfg.backend == "structured":
                warm_state = None
            ref = cand
            best = cand
            if cfg.mode == "rti":
                break
            if step <= cfg.step_tol or (
                    prev_obj is not None
                    and abs(prev_obj - sol.objective) <= cfg.obj_tol * max(1.0, abs(sol.objective))):
                # a stalled objective alone is not enough while the nominal still moves
                if step <= cfg.step_tol or self.check(self.polish(cand, x), x).passed:
                    converged = True
                    break
            prev_obj = sol.objective
        if best is None:
            return ControlResult(np.zeros(self.model.n_u), None, "infeasible", np.inf, np.inf, it,
                                 diags, None, "scp", timings)
        final = self.polish(best, x)
        report = self.check(final, x)
        if report.passed:
            status = "optimal" if converged else "feasible"
        else:
            status = "uncertified"
        final = final.with_(meta={"status": status, "iterations": it})
        timings["total"] = time.perf_counter() - t_start
        return ControlResult(final.applied_input.copy(), final, status, self.true_objective(final),
                             self.value(final), it, diags, report, "scp", timings)

    def candidate(self, x) -> Plan | None:
        """Shifted previous plan explaining ``x`` (``None`` if unavailable)."""
        if self.plan is None:
            return None
        if self.ti is None:
            return shift_warm_start(self.plan, None, self.model, self.err)
        try:
            return build_candidate(self.plan, x, self.ti)
        except (TubeEscapeError, DegenerateBoundError):
            return None

    def step(self, x) -> ControlResult:
        """Closed-loop control law: solve from the shifted candidate, fall back to it if needed."""
        x = np.asarray(x, dtype=float)
        cand = self.candidate(x)
        res = self.solve(x, cand)
        if not res.feasible and self.config.fallback and cand is not None and self.ti is not None:
            rep = check_candidate(cand, self.C, self.ti, self.err, self.model)
            if rep.passed:
                res = ControlResult(cand.applied_input.copy(), cand, "candidate", self.true_objective(cand),
                                    self.value(cand), res.iterations,
                                    res.diagnostics + [{"event": "candidate fallback"}], rep,
                                    "candidate fallback", res.timings)
        self.plan = res.plan
        return res
