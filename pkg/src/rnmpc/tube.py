"""System-response algebra for disturbance-feedback tubes.

A plan over horizon ``T`` consists of a nominal trajectory ``(z, v)``, an
auxiliary correction ``(psi_x, psi_u)`` driven by the initial mismatch, and
block-lower-triangular responses ``Phi_x[k, j]`` (``0 <= j < k <= T``) and
``Phi_u[k, j]`` (``0 <= j < k <= T-1``) mapping the unit-ball disturbance at
step ``j`` to the state and input at step ``k``.  The first sub-diagonal is
the diagonal error bound, ``Phi_x[j+1, j] = diag(sigma_j)``.

The predicted state at step ``k`` lies in the zonotope
``z_k + psi_x_k + sum_j Phi_x[k, j] B`` with ``B`` the unit infinity ball.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linprog

from .model import DimensionError, ErrorBoundParams, Model, jacobians_along, sigma


@dataclass(frozen=True, eq=False)
class SystemResponse:
    """Dense strictly-lower-triangular block storage.

    ``Phi_x`` has shape ``(T+1, T, n_x, n_x)`` and ``Phi_u`` shape
    ``(T, T, n_u, n_x)``; blocks with ``j >= k`` are zero.
    """

    Phi_x: np.ndarray
    Phi_u: np.ndarray

    def __post_init__(self):
        Tx, T = self.Phi_x.shape[:2]
        if Tx != T + 1 or self.Phi_u.shape[:2] != (T, T):
            raise DimensionError("inconsistent system-response block layout")

    @property
    def T(self) -> int:
        return self.Phi_u.shape[0]

    @classmethod
    def zeros(cls, T: int, n_x: int, n_u: int) -> "SystemResponse":
        return cls(np.zeros((T + 1, T, n_x, n_x)), np.zeros((T, T, n_u, n_x)))

    def is_causal(self) -> bool:
        T = self.T
        kx, jx = np.meshgrid(np.arange(T + 1), np.arange(T), indexing="ij")
        ku, ju = np.meshgrid(np.arange(T), np.arange(T), indexing="ij")
        return bool(np.all(self.Phi_x[jx >= kx] == 0) and np.all(self.Phi_u[ju >= ku] == 0))

    def stacked(self) -> np.ndarray:
        """Blocks ``[Phi_x[k, j]; Phi_u[k, j]]`` for ``k < T``: shape ``(T, T, n_x+n_u, n_x)``."""
        return np.concatenate([self.Phi_x[:-1], self.Phi_u], axis=2)


def causal_mask(T: int) -> np.ndarray:
    """Boolean ``(T, T)`` mask with ``mask[k, j] = j < k``."""
    return np.tri(T, T, -1, dtype=bool)


def propagate_phi(A: np.ndarray, B: np.ndarray, sig: np.ndarray, Phi_u: np.ndarray) -> SystemResponse:
    """State responses from input responses and the diagonal error bounds.

    ``A`` (T, n, n), ``B`` (T, n, m), ``sig`` (T, n), ``Phi_u`` (T, T, m, n).
    ``Phi_x[j+1, j] = diag(sig[j])`` and
    ``Phi_x[k+1, j] = A_k Phi_x[k, j] + B_k Phi_u[k, j]`` for ``k > j``.
    """
    T, n = sig.shape
    Phi_u = np.asarray(Phi_u, dtype=float) * causal_mask(T)[:, :, None, None]
    Px = np.zeros((T + 1, T, n, n))
    idx = np.arange(n)
    for k in range(T):
        if k > 0:
            Px[k + 1, :k] = A[k] @ Px[k, :k] + B[k] @ Phi_u[k, :k]
        Px[k + 1, k][idx, idx] = sig[k]
    return SystemResponse(Px, Phi_u)


def propagate_psi(A: np.ndarray, B: np.ndarray, psi_x0: np.ndarray, psi_u: np.ndarray) -> np.ndarray:
    """``psi_x[k+1] = A_k psi_x[k] + B_k psi_u[k]``; returns ``(T+1, n)``."""
    T = psi_u.shape[0]
    out = np.empty((T + 1, psi_x0.shape[0]))
    out[0] = psi_x0
    for k in range(T):
        out[k + 1] = A[k] @ out[k] + B[k] @ psi_u[k]
    return out


@dataclass(frozen=True, eq=False)
class Plan:
    """Nominal trajectory, auxiliary correction, responses and overbounds.

    ``tau_T`` is the terminal overbound slot used only by the shifted
    candidate construction; optimised plans leave it ``None``.
    """

    z: np.ndarray
    v: np.ndarray
    psi_x: np.ndarray
    psi_u: np.ndarray
    Phi: SystemResponse
    tau: np.ndarray
    tau_T: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        T = self.v.shape[0]
        n = self.z.shape[1]
        m = self.v.shape[1]
        shapes = {"z": (T + 1, n), "psi_x": (T + 1, n), "psi_u": (T, m), "tau": (T,)}
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.Phi.Phi_x.shape != (T + 1, T, n, n) or self.Phi.Phi_u.shape != (T, T, m, n):
            raise DimensionError("system response does not match plan dimensions")

    @property
    def T(self) -> int:
        return self.v.shape[0]

    @property
    def n_x(self) -> int:
        return self.z.shape[1]

    @property
    def n_u(self) -> int:
        return self.v.shape[1]

    @property
    def applied_input(self) -> np.ndarray:
        return self.v[0] + self.psi_u[0]

    @classmethod
    def zeros(cls, T: int, n_x: int, n_u: int) -> "Plan":
        return cls(np.zeros((T + 1, n_x)), np.zeros((T, n_u)), np.zeros((T + 1, n_x)),
                   np.zeros((T, n_u)), SystemResponse.zeros(T, n_x, n_u), np.zeros(T))

    def with_(self, **kw) -> "Plan":
        return replace(self, **kw)

    # -- serialisation ----------------------------------------------------
    def to_dict(self) -> dict:
        T = self.T
        blocks_x = [[k, j, self.Phi.Phi_x[k, j].tolist()] for k in range(T + 1) for j in range(min(k, T))]
        blocks_u = [[k, j, self.Phi.Phi_u[k, j].tolist()] for k in range(T) for j in range(k)]
        return {
            "schema": "rnmpc.plan/1",
            "n_x": self.n_x, "n_u": self.n_u, "T": T,
            "z": self.z.tolist(), "v": self.v.tolist(),
            "psi_x": self.psi_x.tolist(), "psi_u": self.psi_u.tolist(),
            "tau": self.tau.tolist(), "tau_T": self.tau_T,
            "Phi_x": blocks_x, "Phi_u": blocks_u,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "Plan":
        if d.get("schema") != "rnmpc.plan/1":
            raise ValueError(f"unsupported plan schema {d.get('schema')!r}")
        T, n, m = int(d["T"]), int(d["n_x"]), int(d["n_u"])
        Phi = SystemResponse.zeros(T, n, m)
        for k, j, blk in d["Phi_x"]:
            Phi.Phi_x[k, j] = blk
        for k, j, blk in d["Phi_u"]:
            Phi.Phi_u[k, j] = blk
        arr = lambda key, shape: np.array(d[key], dtype=float).reshape(shape)
        return cls(arr("z", (T + 1, n)), arr("v", (T, m)), arr("psi_x", (T + 1, n)),
                   arr("psi_u", (T, m)), Phi, arr("tau", (T,)), d.get("tau_T"))

    @classmethod
    def from_json(cls, text: str) -> "Plan":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# reachable sets and tightenings


@dataclass(frozen=True, eq=False)
class ReachableSet:
    """Zonotope ``center + sum_j G_j B`` with ``B`` the unit infinity ball."""

    center: np.ndarray
    generators: np.ndarray          # (k, d, n_w)

    def support(self, c) -> float:
        c = np.asarray(c, dtype=float)
        return float(c @ self.center + np.abs(np.einsum("d,jdn->jn", c, self.generators)).sum())

    def interval_hull(self) -> tuple[np.ndarray, np.ndarray]:
        r = np.abs(self.generators).sum(axis=(0, 2))
        return self.center - r, self.center + r

    def contains(self, p, tol: float = 1e-9) -> bool:
        """Exact membership by a feasibility LP over the generator weights."""
        d = self.center - np.asarray(p, dtype=float)
        if self.generators.shape[0] == 0:
            return bool(np.all(np.abs(d) <= tol))
        G = np.concatenate(list(self.generators), axis=1)          # (d, k*n_w)
        lo, hi = self.interval_hull()
        if np.any(p < lo - tol) or np.any(p > hi + tol):
            return False
        nw = G.shape[1]
        # minimise slack s with |G w - (p - c)| <= s, |w| <= 1
        cvec = np.zeros(nw + 1)
        cvec[-1] = 1.0
        A_ub = np.block([[G, -np.ones((G.shape[0], 1))], [-G, -np.ones((G.shape[0], 1))]])
        b_ub = np.concatenate([-d, d])
        bounds = [(-1, 1)] * nw + [(0, None)]
        res = linprog(cvec, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs")
        return bool(res.status == 0 and res.fun <= tol)


def _check_k(plan: Plan, k: int, upper: int):
    if not 0 <= k <= upper:
        raise IndexError(f"step {k} out of range [0, {upper}]")


def reachable_state(plan: Plan, k: int) -> ReachableSet:
    _check_k(plan, k, plan.T)
    return ReachableSet(plan.z[k] + plan.psi_x[k], plan.Phi.Phi_x[k, :k].copy())


def reachable_input(plan: Plan, k: int) -> ReachableSet:
    _check_k(plan, k, plan.T - 1)
    return ReachableSet(plan.v[k] + plan.psi_u[k], plan.Phi.Phi_u[k, :k].copy())


def tightened_values(plan: Plan, H: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Worst-case constraint values over the tube, shape ``(T, n_c)``.

    Entry ``(k, i)`` is ``sum_j ||h_i' Phi_{k,j}||_1 + h_i'(z_k+psi_x_k,
    v_k+psi_u_k) + b_i``; nonpositive means row ``i`` holds robustly at ``k``.
    """
    T = plan.T
    centers = np.concatenate([plan.z[:T] + plan.psi_x[:T], plan.v + plan.psi_u], axis=1)
    nominal = centers @ H.T + b
    G = H @ plan.Phi.stacked()
    spread = np.abs(G).sum(axis=(1, 3))
    return nominal + spread


def tightened_value(plan: Plan, C, i: int, k: int) -> float:
    _check_k(plan, k, plan.T - 1)
    if not 0 <= i < C.n_c:
        raise IndexError(f"constraint row {i} out of range")
    blocks = plan.Phi.stacked()[k, :k]
    h = C.H[i]
    y = np.concatenate([plan.z[k] + plan.psi_x[k], plan.v[k] + plan.psi_u[k]])
    return float(h @ y + C.b[i] + np.abs(np.einsum("d,jdn->jn", h, blocks)).sum())


def terminal_tightened_values(plan: Plan, ti) -> np.ndarray:
    """Worst-case terminal-set values at step ``T``, shape ``(n_f,)``."""
    T = plan.T
    Hf, bf = ti.X_f.H, ti.X_f.b
    G = Hf @ plan.Phi.Phi_x[T, :T]
    return Hf @ (plan.z[T] + plan.psi_x[T]) + bf + np.abs(G).sum(axis=(0, 2))


def terminal_tightened_value(plan: Plan, ti, i: int) -> float:
    return float(terminal_tightened_values(plan, ti)[i])


def tau_norms(plan: Plan) -> np.ndarray:
    """``||[Phi_(k), psi_k]||_inf`` over the stacked state/input rows, ``(T,)``."""
    T = plan.T
    rows = np.abs(plan.Phi.stacked()).sum(axis=(1, 3))          # (T, n_x+n_u)
    psi = np.abs(np.concatenate([plan.psi_x[:T], plan.psi_u], axis=1))
    return (rows + psi).max(axis=1)


def tau_norm(plan: Plan, k: int) -> float:
    _check_k(plan, k, plan.T - 1)
    return float(tau_norms(plan)[k])


def terminal_tau_norm(plan: Plan, K_f: np.ndarray) -> float:
    """Row-sum norm at step ``T`` of ``[Phi_x[T, :], psi_x_T]`` stacked with its image under ``K_f``."""
    T = plan.T
    Gx = plan.Phi.Phi_x[T, :T]
    G = np.concatenate([Gx, K_f @ Gx], axis=1)
    psi = np.concatenate([plan.psi_x[T], K_f @ plan.psi_x[T]])
    return float((np.abs(G).sum(axis=(0, 2)) + np.abs(psi)).max())


# ---------------------------------------------------------------------------
# plan checks


@dataclass
class PlanReport:
    """Worst residual or margin per constraint family.

    Residual entries must be below ``eq_tol``; margin entries (value of the
    worst tightened constraint, negated) must be above ``-ineq_tol``.
    """

    residuals: dict
    margins: dict
    eq_tol: float = 1e-8
    ineq_tol: float = 1e-6

    @property
    def failures(self) -> list:
        bad = [k for k, v in self.residuals.items() if v > self.eq_tol]
        bad += [k for k, v in self.margins.items() if v < -self.ineq_tol]
        return bad

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {"passed": self.passed, "failures": self.failures,
                "residuals": {k: float(v) for k, v in self.residuals.items()},
                "margins": {k: float(v) for k, v in self.margins.items()}}


def check_plan(plan: Plan, m: Model, err: ErrorBoundParams, C=None, ti=None, x=None,
               terminal: bool = True, exact_sigma: bool = False, eq_tol: float = 1e-8,
               ineq_tol: float = 1e-6, jac=None) -> PlanReport:
    """Verify every plan invariant against the true model.

    Checks nominal dynamics, the auxiliary and response recursions at the
    plan's own Jacobians, the error-bound sub-diagonal, ``psi_x_0 = x - z_0``
    (when ``x`` is given), ``z_T = 0`` and the terminal rows (when
    ``terminal``), tightened constraints (when ``C`` is given) and the
    overbound consistency.  The sub-diagonal check requires
    ``Phi_x[j+1, j] >= sigma_j`` (or equality when ``exact_sigma``).
    """
    T, n = plan.T, plan.n_x
    A, B = jac if jac is not None else jacobians_along(m, plan.z[:T], plan.v)
    f_next = np.real(m.f(plan.z[:T].T, plan.v.T)).T
    res = {"nominal_dynamics": float(np.abs(plan.z[1:] - f_next).max())}
    psi_next = np.einsum("kab,kb->ka", A, plan.psi_x[:T]) + np.einsum("kab,kb->ka", B, plan.psi_u)
    res["psi_dynamics"] = float(np.abs(plan.psi_x[1:] - psi_next).max())
    Px, Pu = plan.Phi.Phi_x, plan.Phi.Phi_u
    if T > 1:
        rec = A[1:, None] @ Px[1:T] + B[1:, None] @ Pu[1:]
        mask = causal_mask(T)[1:, :, None, None]
        res["phi_recursion"] = float(np.abs((Px[2:] - rec) * mask).max())
    else:
        res["phi_recursion"] = 0.0
    res["causality"] = 0.0 if plan.Phi.is_causal() else np.inf
    sig_req = np.array([sigma(err, m, plan.z[j], plan.v[j], max(plan.tau[j], 0.0)) for j in range(T)])
    diag = np.array([np.diag(Px[j + 1, j]) for j in range(T)])
    offdiag = max(float(np.abs(Px[j + 1, j] - np.diag(diag[j])).max()) for j in range(T))
    res["sigma_offdiag"] = offdiag
    margins = {}
    if exact_sigma:
        res["sigma_diag"] = float(np.abs(diag - sig_req).max())
    else:
        margins["sigma_diag"] = float((diag - sig_req).min())
    if x is not None:
        res["initial_condition"] = float(np.abs(plan.psi_x[0] - (np.asarray(x) - plan.z[0])).max())
    if terminal and ti is not None:
        res["terminal_state"] = float(np.abs(plan.z[T]).max())
        margins["terminal"] = float(-terminal_tightened_values(plan, ti).max())
    if C is not None:
        margins["constraints"] = float(-tightened_values(plan, C.H, C.b).max())
    margins["tau"] = float((plan.tau - tau_norms(plan)).min())
    margins["tau_nonneg"] = float(plan.tau.min())
    return PlanReport(res, margins, eq_tol, ineq_tol)


def rollout_error_system(plan: Plan, A, B, w_seq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """States and inputs of the affine-feedback error system for one disturbance sequence.

    Returns ``x_k = z_k + psi_x_k + sum_{j<k} Phi_x[k,j] w_j`` and the input
    analogue; used by sampling oracles.
    """
    T = plan.T
    xs = plan.z + plan.psi_x + np.einsum("kjab,jb->ka", plan.Phi.Phi_x, w_seq[:T])
    us = plan.v + plan.psi_u + np.einsum("kjab,jb->ka", plan.Phi.Phi_u, w_seq[:T])
    return xs, us


# ---------------------------------------------------------------------------
# shifting


def shift_plan(prev: Plan, w_bar: np.ndarray, K: np.ndarray, A_cl: np.ndarray,
               Sigma_f: np.ndarray, tau_f: float, z_append: np.ndarray | None = None) -> Plan:
    """Shift a plan one step, appending the terminal controller.

    ``w_bar`` is the equivalent disturbance realised at step 0 (zero for a
    pure warm start).  Blocks move one step along the diagonal; the last
    input row uses ``K`` and the last state row ``A_cl``; the new terminal
    sub-diagonal block is ``diag(Sigma_f)`` with overbound ``tau_f``.
    ``z_append`` defaults to zero (the terminal equality).
    """
    T, n, m = prev.T, prev.n_x, prev.n_u
    Px, Pu = prev.Phi.Phi_x, prev.Phi.Phi_u
    z = np.vstack([prev.z[1:], np.zeros(n) if z_append is None else z_append])
    v = np.vstack([prev.v[1:], np.zeros((1, m))])
    NPx = np.zeros_like(Px)
    NPu = np.zeros_like(Pu)
    NPx[: T, : T - 1] = Px[1: T + 1, 1:]
    NPx[T, : T - 1] = np.einsum("ab,jbc->jac", A_cl, Px[T, 1:])
    NPx[T, T - 1] = np.diag(Sigma_f)
    NPu[: T - 1, : T - 1] = Pu[1:, 1:]
    NPu[T - 1, : T - 1] = np.einsum("ab,jbc->jac", K, Px[T, 1:])
    psi_x = np.empty_like(prev.psi_x)
    psi_u = np.empty_like(prev.psi_u)
    psi_x[:T] = prev.psi_x[1:] + Px[1:, 0] @ w_bar
    psi_u[: T - 1] = prev.psi_u[1:] + Pu[1:, 0] @ w_bar
    psi_u[T - 1] = K @ psi_x[T - 1]
    psi_x[T] = A_cl @ psi_x[T - 1]
    tau = np.concatenate([prev.tau[1:], [tau_f]])
    return Plan(z, v, psi_x, psi_u, SystemResponse(NPx, NPu), tau, tau_T=tau_f)
