"""Executable recursive-feasibility and input-to-state-stability checks.

Given an optimal plan and the realised next state, :func:`build_candidate`
constructs the shifted plan that is feasible at the next sampling instant:
the realised state is explained by an equivalent disturbance ``w_bar`` in
the unit ball, the responses move one step along the diagonal and the
terminal controller is appended.  :func:`check_candidate` verifies every
constraint of the control problem on that plan; :func:`iss_decrease`
evaluates the Lyapunov decrease of the optimal value.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ErrorBoundParams, Model
from .polytope import ConstraintSet, TerminalIngredients
from .tube import Plan, PlanReport, check_plan, shift_plan, terminal_tau_norm


class DegenerateBoundError(ValueError):
    """A zero error bound met a nonzero deviation."""


class TubeEscapeError(ValueError):
    """The realised state lies outside the first-step tube."""


def equivalent_disturbance(plan: Plan, x_next, tol: float = 1e-9) -> np.ndarray:
    """Unit-ball disturbance that explains ``x_next`` through the first tube block.

    Solves ``diag(sigma_0) w = x_next - z_1 - psi_x_1`` componentwise.
    """
    sig = np.diag(plan.Phi.Phi_x[1, 0]).copy()
    num = np.asarray(x_next, dtype=float) - plan.z[1] - plan.psi_x[1]
    w = np.zeros_like(num)
    zero = sig <= 0.0
    if np.any(np.abs(num[zero]) > 1e-12):
        raise DegenerateBoundError("σ degenerate; bound violated")
    w[~zero] = num[~zero] / sig[~zero]
    if np.abs(w).max(initial=0.0) > 1.0 + tol:
        raise TubeEscapeError(
            f"realized state outside certified tube (|w_bar|_inf = {np.abs(w).max():.6g})")
    return w


@dataclass(frozen=True, eq=False)
class CandidatePlan(Plan):
    """Shifted plan together with its equivalent disturbance and provenance."""

    w_bar: np.ndarray | None = None
    source: Plan | None = None
    x_next: np.ndarray | None = None


def build_candidate(plan: Plan, x_next, ti: TerminalIngredients, tol: float = 1e-9) -> CandidatePlan:
    """Shifted feasible plan for the next step (raises if ``x_next`` escaped the tube)."""
    w_bar = equivalent_disturbance(plan, x_next, tol)
    sh = shift_plan(plan, w_bar, ti.K_f, ti.A_cl, ti.Sigma_f, ti.tau_f)
    return CandidatePlan(sh.z, sh.v, sh.psi_x, sh.psi_u, sh.Phi, sh.tau, sh.tau_T,
                         {"source": "candidate"}, w_bar=w_bar, source=plan,
                         x_next=np.asarray(x_next, dtype=float))


def check_candidate(cand: CandidatePlan, C: ConstraintSet, ti: TerminalIngredients,
                    err: ErrorBoundParams, m: Model, ineq_tol: float = 1e-6,
                    eq_tol: float = 1e-8) -> PlanReport:
    """Every constraint of the control problem on the candidate, worst margin per family.

    On top of the plan checks this covers the terminal overbound slot:
    the step-``T`` rows stacked with their image under ``K_f`` must be
    bounded by ``tau_T``.
    """
    rep = check_plan(cand, m, err, C, ti, x=cand.x_next, terminal=True, exact_sigma=False,
                     eq_tol=eq_tol, ineq_tol=ineq_tol)
    if cand.tau_T is not None:
        rep.margins["tau_terminal"] = float(cand.tau_T - terminal_tau_norm(cand, ti.K_f))
    return rep


def psi_inclusion_gap(cand: CandidatePlan) -> float:
    """Largest violation of ``|psi_bar_k - psi*_{k+1}| <= |Phi*_{k+1,0}| 1`` (should be <= 0)."""
    src = cand.source
    T = src.T
    dev = np.abs(cand.psi_x[:T] - src.psi_x[1:])
    bound = np.abs(src.Phi.Phi_x[1:, 0]).sum(axis=2)
    gap_x = (dev - bound).max()
    dev_u = np.abs(cand.psi_u[:T - 1] - src.psi_u[1:])
    bound_u = np.abs(src.Phi.Phi_u[1:, 0]).sum(axis=2)
    gap_u = (dev_u - bound_u).max() if T > 1 else -np.inf
    return float(max(gap_x, gap_u))


# ---------------------------------------------------------------------------
# input-to-state stability


def plan_value(plan: Plan, Q, R, P) -> float:
    """Stage plus terminal cost of the plan's centre trajectory."""
    T = plan.T
    y = plan.z + plan.psi_x
    w = plan.v + plan.psi_u
    return float(np.einsum("ka,ab,kb->", y[:T], Q, y[:T]) + np.einsum("ka,ab,kb->", w, R, w)
                 + y[T] @ P @ y[T])


@dataclass
class IssReport:
    V_t: float
    V_next: float
    stage: float
    w_norm: float
    c_ell: float
    lhs: float = field(init=False)
    violated: bool = field(init=False)
    tol: float = 1e-9

    def __post_init__(self):
        self.lhs = self.V_next - self.V_t + self.stage
        self.violated = bool(self.lhs > self.c_ell * self.w_norm + self.tol)

    def to_dict(self) -> dict:
        return {"V_t": self.V_t, "V_next": self.V_next, "stage": self.stage,
                "w_norm": self.w_norm, "c_ell": self.c_ell, "lhs": self.lhs,
                "violated": self.violated}


def iss_decrease(prev, nxt, x_t, w_t, Q, c_ell: float = 0.0, tol: float = 1e-9) -> IssReport:
    """Decrease ``V_{t+1} - V_t + x_t'Q x_t <= c_ell ||w_t||`` between two solves.

    ``prev`` and ``nxt`` are control results (anything with a ``value``).
    """
    x_t = np.asarray(x_t, dtype=float)
    return IssReport(float(prev.value), float(nxt.value), float(x_t @ np.asarray(Q) @ x_t),
                     float(np.abs(np.asarray(w_t)).max(initial=0.0)), float(c_ell), tol=tol)


@dataclass
class CEllEstimate:
    c_ell: float
    slope: float
    quantile: float
    n: int


def calibrate_c_ell(lhs, w_norm, margin: float = 1.1, q: float = 0.995) -> CEllEstimate:
    """Estimate ``c_ell`` from a calibration sweep.

    Least-squares slope of ``max(lhs, 0)`` against ``||w||`` through the
    origin, raised to the ``q``-quantile of the per-step ratio and inflated by
    ``margin``.
    """
    lhs = np.asarray(lhs, dtype=float)
    wn = np.asarray(w_norm, dtype=float)
    pos = wn > 0
    if not np.any(pos):
        return CEllEstimate(0.0, 0.0, 0.0, 0)
    y = np.maximum(lhs[pos], 0.0)
    slope = float(wn[pos] @ y / (wn[pos] @ wn[pos]))
    quant = float(np.quantile(y / wn[pos], q))
    return CEllEstimate(margin * max(slope, quant), slope, quant, int(pos.sum()))
