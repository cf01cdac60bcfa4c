"""Closed-loop simulation: disturbances, rollouts, metrics and baselines.

:func:`rollout` runs one receding-horizon episode on the true system and
records states, inputs, disturbances, plans, timings and constraint margins.
Two tube checks are logged.  Per step, the realised next state must lie in
the first-step tube of the plan that produced the input.  Per episode, the
disturbance-feedback policy of the first plan is replayed open loop on the
same disturbance sequence for one horizon and every state must lie in that
plan's reachable set.  :class:`SoftMpcController` is the slack-penalised
nominal MPC used as a baseline; :func:`compare` and :func:`bench` produce the
comparison and timing tables.
"""

from __future__ import annotations

import csv
import io
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import clarabel
import numpy as np
import scipy.sparse as sp

from . import _kernels
from .model import Model, jacobians_along, step
from .polytope import ConstraintSet, CostSpec
from .scp import ControlResult
from .tube import Plan, SystemResponse, reachable_state

ROLLOUT_SCHEMA = "rnmpc.rollout/1"
COMPARE_SCHEMA = "rnmpc.compare/1"
BENCH_SCHEMA = "rnmpc.bench/1"
WORKERS_ENV = "RNMPC_MAX_WORKERS"
KINDS = ("zero", "uniform", "vertex", "worst_row")


class ScenarioMismatchError(ValueError):
    """Two logs compared by :func:`compare` come from different scenarios."""


# ---------------------------------------------------------------------------
# disturbances


@dataclass(frozen=True)
class DisturbancePolicy:
    """Generator of disturbances in the unit infinity ball.

    ``worst_row`` picks, at every step, the vertex that maximises the
    next-step value of constraint row ``row`` (a state row of ``C``).
    """

    kind: str = "uniform"
    seed: int = 0
    row: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"disturbance kind must be one of {KINDS}, got {self.kind!r}")

    def rng(self, episode: int = 0) -> np.random.Generator:
        return np.random.default_rng([self.seed, episode])

    def draw(self, rng: np.random.Generator, m: Model, x, u, C: ConstraintSet | None = None) -> np.ndarray:
        n = m.n_x
        if self.kind == "zero":
            return np.zeros(n)
        if self.kind == "uniform":
            return rng.uniform(-1.0, 1.0, n)
        if self.kind == "vertex":
            return rng.choice([-1.0, 1.0], n)
        if C is None:
            raise ValueError("worst_row disturbances need the constraint set")
        h = C.H[self.row, :m.n_x]
        g = h @ np.asarray(m.E(np.asarray(x, float), np.asarray(u, float)))
        w = np.sign(g)
        w[w == 0] = 1.0
        return w


# ---------------------------------------------------------------------------
# rollout log


@dataclass
class RolloutLog:
    """Per-step record of one closed-loop episode.

    ``margin[t]`` is the largest constraint value ``max_i h_i'(x_t, u_t) + b_i``
    (positive means violated); ``terminal_margin`` covers the state rows at
    the final state.  ``tube_ok[t]`` says whether ``x_{t+1}`` lies in the
    first-step tube of the plan applied at ``t``; ``shadow_ok[k]`` whether the
    open-loop replay of the first plan stays in its reachable set at ``k``.
    """

    scenario: dict
    x: np.ndarray
    u: np.ndarray
    w: np.ndarray
    t: np.ndarray
    V: np.ndarray
    status: list
    timings: list
    margin: np.ndarray
    terminal_margin: float
    tube_ok: np.ndarray
    wbar_norm: np.ndarray
    shadow_ok: np.ndarray
    shadow_x: np.ndarray
    shadow_margin: float
    plans: dict = field(default_factory=dict)
    failure: dict | None = None
    Q: np.ndarray | None = None
    R: np.ndarray | None = None
    tol: float = 1e-6

    def __post_init__(self):
        N = self.u.shape[0]
        if self.x.shape[0] != N + 1 or self.w.shape[0] != N or self.t.shape[0] != N + 1:
            raise ValueError("inconsistent rollout lengths")
        for arr in (self.V, self.margin, self.tube_ok, self.wbar_norm):
            if arr.shape[0] != N:
                raise ValueError("inconsistent rollout lengths")
        if len(self.status) != N or len(self.timings) != N:
            raise ValueError("inconsistent rollout lengths")
        if N and np.any(np.diff(self.t) <= 0):
            raise ValueError("timestamps must increase")

    @property
    def steps(self) -> int:
        return self.u.shape[0]

    @property
    def violations(self) -> np.ndarray:
        """Magnitude of the worst violated row per step (0 when satisfied)."""
        return np.maximum(self.margin, 0.0)

    @property
    def violation_count(self) -> int:
        n = int(np.sum(self.margin > self.tol))
        return n + int(self.terminal_margin > self.tol)

    @property
    def max_violation(self) -> float:
        return float(max(self.margin.max(initial=-np.inf), self.terminal_margin, 0.0))

    @property
    def tube_failures(self) -> int:
        return int(np.sum(~self.tube_ok) + np.sum(~self.shadow_ok))

    @property
    def cost(self) -> float:
        """Closed-loop cost ``sum_t x_t'Q x_t + u_t'R u_t``."""
        N = self.steps
        X = self.x[:N]
        return float(np.einsum("ka,ab,kb->", X, self.Q, X) + np.einsum("ka,ab,kb->", self.u, self.R, self.u))

    @property
    def solve_ms(self) -> np.ndarray:
        return np.array([1e3 * d.get("total", np.nan) for d in self.timings])

    def total_variation(self, idx: Sequence[int]) -> float:
        """Sum of absolute increments of the selected state channels."""
        idx = list(idx)
        if not idx or self.steps == 0:
            return 0.0
        return float(np.abs(np.diff(self.x[:, idx], axis=0)).sum())

    def aggregates(self) -> dict:
        return {"steps": self.steps, "violation_count": self.violation_count,
                "max_violation": self.max_violation, "cost": self.cost,
                "tube_failures": self.tube_failures, "failed": self.failure is not None}

    # -- export -----------------------------------------------------------
    def to_csv(self, path=None) -> str:
        """Flat per-step table; the last row holds the final state."""
        n, m = self.x.shape[1], self.u.shape[1]
        head = ["t"] + [f"x{i}" for i in range(n)] + [f"u{i}" for i in range(m)] + \
            [f"w{i}" for i in range(n)] + ["V", "status", "solve_ms", "margin", "tube_ok", "wbar_norm"]
        buf = io.StringIO()
        wr = csv.writer(buf)
        wr.writerow([f"# schema={ROLLOUT_SCHEMA}"])
        wr.writerow(head)
        ms = self.solve_ms
        for k in range(self.steps):
            wr.writerow([repr(float(self.t[k]))] + [repr(float(a)) for a in self.x[k]]
                        + [repr(float(a)) for a in self.u[k]] + [repr(float(a)) for a in self.w[k]]
                        + [repr(float(self.V[k])), self.status[k], repr(float(ms[k])),
                           repr(float(self.margin[k])), int(self.tube_ok[k]),
                           repr(float(self.wbar_norm[k]))])
        N = self.steps
        wr.writerow([repr(float(self.t[N]))] + [repr(float(a)) for a in self.x[N]]
                    + [""] * (m + n) + ["", "final", "", repr(float(self.terminal_margin)), "", ""])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def to_dict(self) -> dict:
        return {
            "schema": ROLLOUT_SCHEMA,
            "scenario": self.scenario,
            "x": self.x.tolist(), "u": self.u.tolist(), "w": self.w.tolist(), "t": self.t.tolist(),
            "V": self.V.tolist(), "status": list(self.status), "timings": self.timings,
            "margin": self.margin.tolist(), "terminal_margin": self.terminal_margin,
            "tube_ok": self.tube_ok.tolist(), "wbar_norm": self.wbar_norm.tolist(),
            "shadow_ok": self.shadow_ok.tolist(), "shadow_x": self.shadow_x.tolist(),
            "shadow_margin": self.shadow_margin,
            "plans": {str(k): p.to_dict() for k, p in self.plans.items()},
            "failure": self.failure, "Q": None if self.Q is None else self.Q.tolist(),
            "R": None if self.R is None else self.R.tolist(), "tol": self.tol,
            "aggregates": self.aggregates(),
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), default=_json_default)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "RolloutLog":
        if d.get("schema") != ROLLOUT_SCHEMA:
            raise ValueError(f"unsupported rollout schema {d.get('schema')!r}")
        n = len(d["x"][0])
        N = len(d["u"])
        arr = lambda key, shape: np.array(d[key], dtype=float).reshape(shape)  # noqa: E731
        return cls(d["scenario"], arr("x", (N + 1, n)), arr("u", (N, -1)) if N else
                   np.zeros((0, len(d["R"]) if d["R"] else 0)), arr("w", (N, n)), arr("t", (N + 1,)),
                   arr("V", (N,)), list(d["status"]), list(d["timings"]), arr("margin", (N,)),
                   float(d["terminal_margin"]), np.array(d["tube_ok"], dtype=bool).reshape(N),
                   arr("wbar_norm", (N,)), np.array(d["shadow_ok"], dtype=bool).reshape(-1),
                   np.array(d["shadow_x"], dtype=float).reshape(-1, n), float(d["shadow_margin"]),
                   {int(k): Plan.from_dict(p) for k, p in d["plans"].items()}, d["failure"],
                   None if d["Q"] is None else np.array(d["Q"]),
                   None if d["R"] is None else np.array(d["R"]), float(d["tol"]))

    @classmethod
    def from_json(cls, text: str) -> "RolloutLog":
        return cls.from_dict(json.loads(text))


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not serialisable: {type(o).__name__}")


# ---------------------------------------------------------------------------
# tube checks


def feedback_rollout(plan: Plan, m: Model, x0, w_seq: np.ndarray):
    """Apply the plan's disturbance-feedback policy to the true system.

    At each step the input is ``v_k + psi_u_k + sum_{j<k} Phi_u[k,j] w_j``
    where the ``w_j`` are recovered from the realised states through the
    (diagonal) sub-diagonal blocks of ``Phi_x``.  Returns states (T+1, n),
    inputs (T, m) and recovered disturbances (T, n); a recovered entry is
    infinite when a zero bound meets a nonzero deviation.
    """
    T, n = plan.T, plan.n_x
    Px, Pu = plan.Phi.Phi_x, plan.Phi.Phi_u
    xs = np.zeros((T + 1, n))
    us = np.zeros((T, plan.n_u))
    wr = np.zeros((T, n))
    xs[0] = np.asarray(x0, dtype=float)
    for k in range(T):
        us[k] = plan.v[k] + plan.psi_u[k] + np.einsum("jab,jb->a", Pu[k, :k], wr[:k])
        xs[k + 1] = step(m, xs[k], us[k], w_seq[k])
        dev = xs[k + 1] - plan.z[k + 1] - plan.psi_x[k + 1] - np.einsum("jab,jb->a", Px[k + 1, :k], wr[:k])
        sig = np.diag(Px[k + 1, k])
        pos = sig > 0
        wr[k, pos] = dev[pos] / sig[pos]
        wr[k, ~pos] = np.where(np.abs(dev[~pos]) > 1e-12, np.inf, 0.0)
    return xs, us, wr


def first_step_escape(plan: Plan, x_next) -> float:
    """``||w_bar||_inf`` of the equivalent disturbance explaining ``x_next`` (inf if unexplainable)."""
    sig = np.diag(plan.Phi.Phi_x[1, 0])
    dev = np.asarray(x_next, dtype=float) - plan.z[1] - plan.psi_x[1]
    pos = sig > 0
    if np.any(np.abs(dev[~pos]) > 1e-12):
        return float("inf")
    return float(np.abs(dev[pos] / sig[pos]).max(initial=0.0))


# ---------------------------------------------------------------------------
# rollout


def _margins(C: ConstraintSet, x, u) -> float:
    return float(C.values(np.concatenate([x, u])).max())


def _state_rows(C: ConstraintSet):
    keep = np.all(C.H[:, C.n_x:] == 0, axis=1)
    return C.H[keep, :C.n_x], C.b[keep]


def rollout(ctrl, m: Model, dp: DisturbancePolicy, x0, steps: int, *, C: ConstraintSet | None = None,
            episode: int = 0, thin: int = 1, tube_checks: bool | None = None, tol: float = 1e-6,
            scenario: dict | None = None) -> RolloutLog:
    """Run one closed-loop episode.

    Parameters
    ----------
    ctrl
        Controller with ``reset()`` and ``step(x) -> ControlResult``.
    dp
        Disturbance policy; the generator is seeded with ``(dp.seed, episode)``.
    C
        Constraint set used for the margins (defaults to ``ctrl.C``).
    thin
        Keep every ``thin``-th plan (0 keeps none).
    tube_checks
        Compute the first-step and open-loop replay containment flags
        (default: whenever the controller plans tubes).

    A controller exception or an infeasible solve ends the episode early and
    is recorded in ``failure``.
    """
    C = ctrl.C if C is None else C
    if tube_checks is None:
        tube_checks = getattr(ctrl, "plans_tubes", True)
    Q = np.asarray(ctrl.cost.Q, dtype=float)
    R = np.asarray(ctrl.cost.R, dtype=float)
    rng = dp.rng(episode)
    x = np.asarray(x0, dtype=float).copy()
    dt = m.dt if m.dt else 1.0
    xs, us, ws, V, status, timings, margin, tube_ok, wbn = [x.copy()], [], [], [], [], [], [], [], []
    plans = {}
    plan0 = None
    failure = None
    if hasattr(ctrl, "reset"):
        ctrl.reset()
    for t in range(steps):
        try:
            res: ControlResult = ctrl.step(x)
        except Exception as exc:  # recorded, the log is truncated
            failure = {"t": t, "kind": "error", "message": f"{type(exc).__name__}: {exc}"}
            break
        if res.status == "infeasible":
            msg = "initial state not robustly feasible" if t == 0 else "subproblem infeasible"
            failure = {"t": t, "kind": "infeasible", "message": msg}
            break
        u = np.asarray(res.u, dtype=float)
        w = dp.draw(rng, m, x, u, C)
        x_next = step(m, x, u, w)
        if t == 0:
            plan0 = res.plan
        if thin and res.plan is not None and t % thin == 0:
            plans[t] = res.plan
        wb = first_step_escape(res.plan, x_next) if (tube_checks and res.plan is not None) else np.nan
        us.append(u)
        ws.append(w)
        V.append(res.value)
        status.append(res.status)
        timings.append({k: float(v) for k, v in res.timings.items()})
        margin.append(_margins(C, x, u))
        wbn.append(wb)
        tube_ok.append(not (wb > 1.0 + tol))
        x = x_next
        xs.append(x.copy())
    N = len(us)
    Hx, bx = _state_rows(C)
    term = float((Hx @ x + bx).max(initial=-np.inf)) if Hx.size else -np.inf
    shadow_ok = np.zeros(0, dtype=bool)
    shadow_x = np.zeros((0, m.n_x))
    shadow_margin = -np.inf
    if tube_checks and plan0 is not None and plan0.T <= N:
        T = plan0.T
        W = np.array(ws[:T])
        shadow_x, shadow_u, _ = feedback_rollout(plan0, m, xs[0], W)
        shadow_ok = np.array([bool(np.all(np.isfinite(shadow_x[k])))
                              and reachable_state(plan0, k).contains(shadow_x[k], tol)
                              for k in range(T + 1)], dtype=bool)
        shadow_margin = max(_margins(C, shadow_x[k], shadow_u[k]) for k in range(T))
    sc = dict(scenario or {})
    sc.setdefault("model", m.name)
    sc.update({"disturbance": dp.kind, "seed": dp.seed, "row": dp.row, "episode": episode,
               "steps": steps, "x0": np.asarray(x0, dtype=float).tolist()})
    return RolloutLog(sc, np.array(xs), np.array(us).reshape(N, m.n_u), np.array(ws).reshape(N, m.n_x),
                      dt * np.arange(N + 1), np.array(V, dtype=float), status, timings,
                      np.array(margin, dtype=float), term, np.array(tube_ok, dtype=bool),
                      np.array(wbn, dtype=float), shadow_ok, shadow_x, float(shadow_margin), plans,
                      failure, Q, R, tol)


def _episode_task(args):
    make_ctrl, dp, x0, steps, episode, kw = args
    ctrl = make_ctrl()
    return rollout(ctrl, ctrl.model, dp, x0, steps, episode=episode, **kw)


def worker_count(requested: int | None = None) -> int:
    """Worker processes to use: the request capped by ``RNMPC_MAX_WORKERS`` and the CPU count."""
    cap = int(os.environ.get(WORKERS_ENV, os.cpu_count() or 1))
    want = requested if requested is not None else (os.cpu_count() or 1)
    return max(1, min(cap, want))


def run_episodes(make_ctrl: Callable, dp: DisturbancePolicy, x0s, steps: int,
                 workers: int | None = None, **kw) -> list[RolloutLog]:
    """Run one episode per initial state, in parallel when allowed.

    ``make_ctrl`` must be a picklable zero-argument factory; each episode gets
    its own controller.  Logs come back ordered by episode index.
    """
    tasks = [(make_ctrl, dp, np.asarray(x0, dtype=float), steps, i, kw) for i, x0 in enumerate(x0s)]
    nw = worker_count(workers)
    if nw == 1 or len(tasks) <= 1:
        return [_episode_task(a) for a in tasks]
    with ProcessPoolExecutor(max_workers=nw) as ex:
        return list(ex.map(_episode_task, tasks))


# ---------------------------------------------------------------------------
# soft-constrained baseline


class SoftMpcController:
    """Nominal nonlinear MPC with exact one-norm slack penalties.

    Every constraint row at every step gets a nonnegative slack with weight
    ``penalty`` (default ``1e3 max(||Q||, ||R||)``).  No responses, no
    tightening and no terminal set, so each convex subproblem is feasible.
    The dynamics are linearised around the shifted previous solution and the
    problem is re-solved up to ``max_iter`` times.
    """

    plans_tubes = False

    def __init__(self, m: Model, C: ConstraintSet, cost: CostSpec, T: int, penalty: float | None = None,
                 max_iter: int = 5, step_tol: float = 1e-6):
        self.model = m
        self.C = C
        self.cost = cost
        self.T = T
        self.P = cost.P if cost.P is not None else cost.Q
        self.penalty = float(penalty) if penalty is not None else \
            1e3 * max(np.linalg.norm(cost.Q, 2), np.linalg.norm(cost.R, 2))
        self.max_iter = max_iter
        self.step_tol = step_tol
        self.plan: Plan | None = None
        Cn = C.normalized()
        self._H, self._b = Cn.H, Cn.b
        self._Hx, self._bx = _state_rows(Cn)
        self._static = self._static_parts()

    def reset(self):
        self.plan = None

    def _static_parts(self):
        T, n, mm = self.T, self.model.n_x, self.model.n_u
        nc, nf = self._H.shape[0], self._Hx.shape[0]
        nz, nv, ns = (T + 1) * n, T * mm, T * nc + nf
        Pz = sp.block_diag([sp.kron(sp.eye(T), self.cost.Q), sp.csc_matrix(self.P)])
        Pv = sp.kron(sp.eye(T), self.cost.R)
        P = 2.0 * sp.block_diag([Pz, Pv, sp.csc_matrix((ns, ns))], format="csc")
        q = np.concatenate([np.zeros(nz + nv), self.penalty * np.ones(ns)])
        Hx, Hu = self._H[:, :n], self._H[:, n:]
        G = sp.bmat([[sp.block_diag([sp.kron(sp.eye(T), Hx), sp.csc_matrix(self._Hx)]),
                      sp.vstack([sp.kron(sp.eye(T), Hu), sp.csc_matrix((nf, nv))]), -sp.eye(ns)],
                     [None, sp.csc_matrix((ns, nv)), -sp.eye(ns)]], format="csc")
        h = np.concatenate([np.tile(-self._b, T), -self._bx, np.zeros(ns)])
        return {"P": sp.triu(P, format="csc"), "q": q, "G": G, "h": h, "nz": nz, "nv": nv, "ns": ns}

    def _solve_qp(self, A, Bm, c, x):
        T, n, mm = self.T, self.model.n_x, self.model.n_u
        S = self._static
        nz, nv, ns = S["nz"], S["nv"], S["ns"]
        # equalities: z_0 = x; z_{k+1} - A_k z_k - B_k v_k = c_k
        Ez = sp.eye(nz) - sp.bmat([[None, sp.csc_matrix((n, n))], [sp.block_diag(list(A)), None]])
        Ev = sp.vstack([sp.csc_matrix((n, nv)), -sp.block_diag(list(Bm))])
        E = sp.hstack([Ez, Ev, sp.csc_matrix((nz, ns))], format="csc")
        beq = np.concatenate([x, c.reshape(-1)])
        Acl = sp.vstack([E, S["G"]], format="csc")
        bcl = np.concatenate([beq, S["h"]])
        cones = [clarabel.ZeroConeT(nz), clarabel.NonnegativeConeT(S["G"].shape[0])]
        st = clarabel.DefaultSettings()
        st.verbose = False
        st.max_iter = 100
        sol = clarabel.DefaultSolver(S["P"], S["q"], Acl, bcl, cones, st).solve()
        ok = str(sol.status) in ("Solved", "AlmostSolved")
        xv = np.array(sol.x)
        return ok, xv[:nz].reshape(T + 1, n), xv[nz:nz + nv].reshape(T, mm), xv[nz + nv:]

    def solve(self, x) -> ControlResult:
        m, T = self.model, self.T
        x = np.asarray(x, dtype=float)
        t0 = time.perf_counter()
        if self.plan is not None:
            z = np.vstack([self.plan.z[1:], self.plan.z[-1:]])
            v = np.vstack([self.plan.v[1:], self.plan.v[-1:]])
            z[0] = x
        else:
            z = np.repeat(x[None], T + 1, axis=0)
            v = np.zeros((T, m.n_u))
        timings = {"jac": 0.0, "qp": 0.0}
        status = "feasible"
        best = None
        it = 0
        for it in range(1, self.max_iter + 1):
            t1 = time.perf_counter()
            A, Bm = jacobians_along(m, z[:T], v)
            f = np.real(m.f(z[:T].T, v.T)).T
            c = f - np.einsum("kab,kb->ka", A, z[:T]) - np.einsum("kab,kb->ka", Bm, v)
            t2 = time.perf_counter()
            ok, zn, vn, s = self._solve_qp(A, Bm, c, x)
            timings["jac"] += t2 - t1
            timings["qp"] += time.perf_counter() - t2
            if not ok or not np.all(np.isfinite(zn)):
                break
            stepsize = max(np.abs(zn - z).max(), np.abs(vn - v).max())
            z, v = zn, vn
            best = (z, v, s)
            if stepsize <= self.step_tol:
                status = "optimal"
                break
        if best is None:
            # fall back to holding the previous input rather than failing
            u = self.plan.v[1] if (self.plan is not None and T > 1) else np.zeros(m.n_u)
            z = np.repeat(x[None], T + 1, axis=0)
            v = np.tile(u, (T, 1))
            s = np.zeros(self._static["ns"])
            status = "fallback"
        else:
            z, v, s = best
        plan = Plan(z, v, np.zeros_like(z), np.zeros_like(v), SystemResponse.zeros(T, m.n_x, m.n_u),
                    np.zeros(T), meta={"status": status, "slack": float(np.sum(s))})
        value = float(np.einsum("ka,ab,kb->", z[:T], self.cost.Q, z[:T])
                      + np.einsum("ka,ab,kb->", v, self.cost.R, v) + z[T] @ self.P @ z[T])
        timings["total"] = time.perf_counter() - t0
        return ControlResult(v[0].copy(), plan, status, value + self.penalty * float(np.sum(s)),
                             value, it, [], None, "soft", timings)

    def step(self, x) -> ControlResult:
        res = self.solve(x)
        self.plan = res.plan
        return res


# ---------------------------------------------------------------------------
# comparison


_SCENARIO_KEYS = ("model", "disturbance", "seed", "row", "episode", "steps", "x0")


@dataclass
class ComparisonReport:
    rows: list

    def to_markdown(self) -> str:
        head = "| controller | violations | worst violation | cost | velocity TV |"
        sep = "|---|---:|---:|---:|---:|"
        body = [f"| {r['controller']} | {r['violations']} | {r['worst_violation']:.3e} | "
                f"{r['cost']:.6g} | {r['velocity_tv']:.6g} |" for r in self.rows]
        return "\n".join([head, sep, *body]) + "\n"

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        wr = csv.DictWriter(buf, fieldnames=["controller", "violations", "worst_violation", "cost",
                                             "velocity_tv"])
        wr.writeheader()
        for r in self.rows:
            wr.writerow(r)
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def row(self, controller: str) -> dict:
        return next(r for r in self.rows if r["controller"] == controller)


def _summary(name: str, logs: Sequence[RolloutLog], vel: Sequence[int]) -> dict:
    return {"controller": name,
            "violations": int(sum(lg.violation_count for lg in logs)),
            "worst_violation": float(max(lg.max_violation for lg in logs)),
            "cost": float(sum(lg.cost for lg in logs)),
            "velocity_tv": float(sum(lg.total_variation(vel) for lg in logs))}


def compare(robust, soft, velocity_idx: Sequence[int] = ()) -> ComparisonReport:
    """Tabulate violations, cost and velocity total variation of two controllers.

    ``robust`` and ``soft`` are logs (or equal-length lists of logs) of the
    same scenarios; totals are summed over episodes.
    """
    rl = [robust] if isinstance(robust, RolloutLog) else list(robust)
    sl = [soft] if isinstance(soft, RolloutLog) else list(soft)
    if len(rl) != len(sl):
        raise ScenarioMismatchError("different numbers of episodes")
    for a, b in zip(rl, sl):
        ka = {k: a.scenario.get(k) for k in _SCENARIO_KEYS}
        kb = {k: b.scenario.get(k) for k in _SCENARIO_KEYS}
        if ka != kb:
            diff = sorted(k for k in _SCENARIO_KEYS if ka[k] != kb[k])
            raise ScenarioMismatchError(f"logs come from different scenarios (differ in {', '.join(diff)})")
    return ComparisonReport([_summary("robust", rl, velocity_idx), _summary("soft", sl, velocity_idx)])


# ---------------------------------------------------------------------------
# timing benchmark


@dataclass
class BenchRow:
    dynamics: str
    N: int
    jac: float
    ricc: float
    qp: float
    reps: int


def bench_case(m: Model, C: ConstraintSet, cost: CostSpec, err, T: int, reps: int = 20,
               warmup: int = 2, x0=None) -> BenchRow:
    """Average per-phase times in milliseconds for one model and horizon.

    Jac: Jacobians along the reference.  Ricc: one Riccati factorisation and
    the sweep of every response column.  QP: the nominal QP with the
    resulting tightening.
    """
    from .scp import RmpcController, ScpConfig
    from .subproblem import AlternationSettings, _column_weights, _stage_weights, build, \
        consistent_responses, solve_nominal

    ctrl = RmpcController(m, err, C, cost, None, ScpConfig(T=T, simplified=True, backend="alternating"))
    x0 = np.zeros(m.n_x) if x0 is None else np.asarray(x0, dtype=float)
    ref = ctrl.cold_start(x0)
    sp_ = build(ref, m, ctrl.err, C, ctrl._cost, x0, None, psi_free=False)
    n, mm = m.n_x, m.n_u
    W, WT = _column_weights(sp_, None, None, None, AlternationSettings())
    Ws = _stage_weights(W, T, n)
    zL, zLu, zLT = np.zeros((T, T, n, n)), np.zeros((T, T, mm, n)), np.zeros((T, n, n))
    tj, tr, tq = [], [], []
    for r in range(warmup + reps):
        t0 = time.perf_counter()
        jacobians_along(m, ref.z[:T], ref.v)
        t1 = time.perf_counter()
        Pm, K, Gi = _kernels.lq_factor(sp_.A, sp_.B, *Ws, WT, 1)
        Xo = np.zeros((T + 1, T, n, n))
        Uo = np.zeros((T, T, mm, n))
        _kernels.column_sweep(sp_.A, sp_.B, Pm, K, Gi, zL, zLu, zLT, sp_.e, np.zeros(n), np.zeros(T),
                              1.0, False, Xo, Uo, np.zeros(T))
        t2 = time.perf_counter()
        Phi, tau, _ = consistent_responses(sp_.A, sp_.B, sp_.e, np.zeros(n), Uo, np.zeros(T),
                                           np.zeros((T, n + mm)))
        t3 = time.perf_counter()
        solve_nominal(sp_, Phi, tau)
        t4 = time.perf_counter()
        if r >= warmup:
            tj.append(t1 - t0)
            tr.append(t2 - t1)
            tq.append(t4 - t3)
    return BenchRow(m.name, T, 1e3 * float(np.mean(tj)), 1e3 * float(np.mean(tr)),
                    1e3 * float(np.mean(tq)), reps)


def bench(scales: Sequence[tuple], reps: int = 20) -> list[BenchRow]:
    """Timing table for ``(model id, T)`` pairs using the bundled model data."""
    from . import systems

    rows = []
    for name, T in scales:
        m = systems.load_model(name)
        rows.append(bench_case(m, systems.default_constraints(name), systems.default_cost(name),
                               systems.stored_error_bound(name, m), int(T), reps=reps))
    return rows


def bench_csv(rows: Sequence[BenchRow], path=None) -> str:
    """CSV with columns ``Dynamics, N, Jac, Ricc, QP`` (milliseconds)."""
    buf = io.StringIO()
    wr = csv.writer(buf)
    wr.writerow(["Dynamics", "N", "Jac", "Ricc", "QP"])
    for r in rows:
        wr.writerow([r.dynamics, r.N, f"{r.jac:.4f}", f"{r.ricc:.4f}", f"{r.qp:.4f}"])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def scaling_exponent(Ts: Sequence[int], times: Sequence[float]) -> float:
    """Slope of the least-squares fit of ``log time`` against ``log T``."""
    return float(np.polyfit(np.log(np.asarray(Ts, float)), np.log(np.asarray(times, float)), 1)[0])
