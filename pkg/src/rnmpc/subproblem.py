"""Convex subproblem of one sequential-convex-programming iteration.

Around a reference trajectory ``(z_ref, v_ref)`` the dynamics are replaced by
their linearisation ``z_{k+1} = A_k z_k + B_k v_k + c_k``.  The decision
variables are the nominal trajectory, the auxiliary correction ``psi``, the
input responses ``Phi_u``, the state responses ``Phi_x`` (for ``k >= j+2``),
the overbounds ``tau`` and auxiliary scalars ``g_j >= tau_j^2`` that enter the
error bound, ``Phi_x[j+1, j] = diag(e_j + mu g_j)``.  The program is

    minimise  sum_k l(z_k + psi_x_k, v_k + psi_u_k) + l_f(z_T + psi_x_T)
              + rho_reg ||Phi||_F^2
    s.t.      linearised nominal and response dynamics,
              psi_x_0 = x - z_0, z_T = 0,
              sum_j ||h_i' Phi_{k,j}||_1 + h_i' y_k + b_i + eps <= 0,
              terminal rows at step T,
              ||[Phi_(k), psi_k]||_inf <= tau_k,  g_j >= tau_j^2,
              optional trust region on (z, v).

Two backends solve the same program: :func:`solve_generic` assembles it as a
sparse conic problem for Clarabel, :func:`solve_structured` runs an
operator-splitting method whose linear-system step is a set of Riccati
recursions, one per response column, followed by an exact nominal QP.
"""

from __future__ import annotations

import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import NamedTuple

import clarabel
import numpy as np
import scipy.sparse as sp

from . import _kernels
from .model import ErrorBoundParams, Model, jacobians_along
from .polytope import ConstraintSet, CostSpec, TerminalIngredients
from .tube import Plan, PlanReport, SystemResponse, causal_mask, tau_norms, tightened_values


@dataclass(frozen=True, eq=False)
class ConvexSubproblem:
    """Data of one convex subproblem; see the module docstring.

    ``H``/``b`` hold the normalised constraint rows on ``(x, u)``, ``Hf``/``bf``
    the terminal rows (``None`` without a terminal set).  ``e`` has shape
    ``(T, n_x)``: the additive error bound at each step.  ``psi_free = False``
    pins ``psi = 0`` and ``z_0 = x``.  ``psi_reg`` is a small weight on
    ``||psi||^2``: the cost only sees ``z + psi``, so without it the split
    between the two is not unique and interior-point iterations stall.
    """

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    x0: np.ndarray
    z_ref: np.ndarray
    v_ref: np.ndarray
    H: np.ndarray
    b: np.ndarray
    Hf: np.ndarray | None
    bf: np.ndarray | None
    e: np.ndarray
    mu: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    rho_reg: float = 1e-3
    trust: float | None = None
    psi_free: bool = True
    terminal_eq: bool = True
    backoff: float = 0.0
    ref: Plan | None = None
    jac_time: float = 0.0
    psi_reg: float = 1e-6

    @property
    def T(self) -> int:
        return self.A.shape[0]

    @property
    def n(self) -> int:
        return self.A.shape[1]

    @property
    def m(self) -> int:
        return self.B.shape[2]

    @property
    def tau_on(self) -> bool:
        return bool(np.any(self.mu > 0))

    @property
    def n_c(self) -> int:
        return self.H.shape[0]

    @property
    def n_f(self) -> int:
        return 0 if self.Hf is None else self.Hf.shape[0]


@dataclass
class SubproblemSolution:
    z: np.ndarray
    v: np.ndarray
    psi_x: np.ndarray
    psi_u: np.ndarray
    Phi: SystemResponse
    tau: np.ndarray
    g: np.ndarray
    objective: float
    status: str
    iterations: int = 0
    timings: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "optimal"

    def to_plan(self) -> Plan:
        return Plan(self.z, self.v, self.psi_x, self.psi_u, self.Phi, self.tau,
                    meta={"status": self.status, "objective": self.objective})


# ---------------------------------------------------------------------------
# construction


def build(ref: Plan, m: Model, err: ErrorBoundParams, C: ConstraintSet, cost: CostSpec,
          x, ti: TerminalIngredients | None = None, *, rho_reg: float = 1e-3,
          trust: float | None = None, psi_free: bool = True, backoff: float = 0.0,
          terminal_eq: bool | None = None) -> ConvexSubproblem:
    """Linearise around ``ref`` and collect the subproblem data.

    Without terminal ingredients the terminal equality and terminal rows are
    dropped and ``cost.P`` (or ``Q``) is used as terminal weight.
    """
    T = ref.T
    t0 = time.perf_counter()
    A, B = jacobians_along(m, ref.z[:T], ref.v)
    jac_time = time.perf_counter() - t0
    f_ref = np.real(m.f(ref.z[:T].T, ref.v.T)).T
    c = f_ref - np.einsum("kab,kb->ka", A, ref.z[:T]) - np.einsum("kab,kb->ka", B, ref.v)
    e = np.array([err.e_rows(ref.z[k], ref.v[k]) for k in range(T)])
    Cn = C.normalized()
    if ti is not None:
        Xf = ti.X_f.normalized()
        Hf, bf, P = Xf.H, Xf.b, ti.P
    else:
        Hf = bf = None
        P = cost.P if cost.P is not None else cost.Q
    return ConvexSubproblem(
        A=A, B=B, c=c, x0=np.asarray(x, dtype=float), z_ref=ref.z.copy(), v_ref=ref.v.copy(),
        H=Cn.H, b=Cn.b, Hf=Hf, bf=bf, e=e, mu=np.asarray(err.mu, dtype=float),
        Q=cost.Q, R=cost.R, P=np.asarray(P, dtype=float), rho_reg=rho_reg, trust=trust,
        psi_free=psi_free, terminal_eq=(ti is not None) if terminal_eq is None else terminal_eq,
        backoff=backoff, ref=ref, jac_time=jac_time)


def objective(sp_: ConvexSubproblem, z, v, psi_x, psi_u, Phi: SystemResponse) -> float:
    """Objective of the subproblem at a point (responses include the sub-diagonal)."""
    T = sp_.T
    y = z + psi_x
    w = v + psi_u
    J = np.einsum("ka,ab,kb->", y[:T], sp_.Q, y[:T]) + np.einsum("ka,ab,kb->", w, sp_.R, w)
    J += y[T] @ sp_.P @ y[T]
    J += sp_.rho_reg * (np.sum(Phi.Phi_x ** 2) + np.sum(Phi.Phi_u ** 2))
    if sp_.psi_free:
        J += sp_.psi_reg * (np.sum(psi_x ** 2) + np.sum(psi_u ** 2))
    return float(J)


def consistent_responses(A, B, e, mu, Phi_u, tau, psi, g=None):
    """Propagate responses while raising ``tau`` until every overbound row holds.

    Works step by step: the rows at step ``k`` only involve columns ``j < k``,
    so ``tau_k`` (and with it ``g_k >= tau_k^2`` and the sub-diagonal block
    ``diag(e_k + mu g_k)``) can be fixed before column ``k`` is propagated.
    ``psi`` is ``(T, n+m)``; ``g = None`` means ``g = tau^2`` exactly.
    Returns ``(Phi, tau, g)``.
    """
    T, n = e.shape
    tau = np.array(tau, dtype=float)
    g = tau ** 2 if g is None else np.maximum(np.array(g, dtype=float), tau ** 2)
    Px = np.zeros((T + 1, T, n, n))
    Pu = np.asarray(Phi_u, dtype=float) * causal_mask(T)[:, :, None, None]
    idx = np.arange(n)
    for k in range(T):
        if k > 0:
            Px[k, :k - 1] = A[k - 1] @ Px[k - 1, :k - 1] + B[k - 1] @ Pu[k - 1, :k - 1]
        rows = np.abs(np.concatenate([Px[k, :k], Pu[k, :k]], axis=1)).sum(axis=(0, 2))
        tau[k] = max(tau[k], float((rows + np.abs(psi[k])).max()))
        g[k] = max(g[k], tau[k] ** 2)
        Px[k + 1, k][idx, idx] = e[k] + mu * g[k]
    if T > 1:
        Px[T, :T - 1] = A[T - 1] @ Px[T - 1, :T - 1] + B[T - 1] @ Pu[T - 1, :T - 1]
    return SystemResponse(Px, Pu), tau, g


def check_solution(sp_: ConvexSubproblem, sol: SubproblemSolution, eq_tol: float = 1e-6,
                   ineq_tol: float = 1e-6) -> PlanReport:
    """Plan invariants of a subproblem solution at the subproblem's linearisation.

    Residuals: linearised nominal dynamics, correction and response
    recursions, the sub-diagonal ``diag(e_j + mu g_j)``, the initial
    condition and (with a terminal set) ``z_T = 0``.  Margins: tightened
    rows (with the back-off), terminal rows, ``g_j >= tau_j^2`` and the
    overbound rows.
    """
    T, n = sp_.T, sp_.n
    A, B = sp_.A, sp_.B
    z, v, px, pu = sol.z, sol.v, sol.psi_x, sol.psi_u
    Px, Pu = sol.Phi.Phi_x, sol.Phi.Phi_u
    lin = np.einsum("kab,kb->ka", A, z[:T]) + np.einsum("kab,kb->ka", B, v) + sp_.c
    res = {"nominal_dynamics": float(np.abs(z[1:] - lin).max())}
    nxt = np.einsum("kab,kb->ka", A, px[:T]) + np.einsum("kab,kb->ka", B, pu)
    res["psi_dynamics"] = float(np.abs(px[1:] - nxt).max())
    if T > 1:
        rec = A[1:, None] @ Px[1:T] + B[1:, None] @ Pu[1:]
        res["phi_recursion"] = float(np.abs((Px[2:] - rec) * causal_mask(T)[1:, :, None, None]).max())
    res["causality"] = 0.0 if sol.Phi.is_causal() else np.inf
    mu = sp_.mu if sp_.tau_on else np.zeros(n)
    g = sol.g if sp_.tau_on else np.zeros(T)
    sub = np.array([Px[j + 1, j] for j in range(T)])
    want = np.array([np.diag(sp_.e[j] + mu * g[j]) for j in range(T)])
    res["sigma_block"] = float(np.abs(sub - want).max())
    x0 = sp_.x0
    if sp_.psi_free:
        res["initial_condition"] = float(np.abs(px[0] + z[0] - x0).max())
    else:
        res["initial_condition"] = float(max(np.abs(z[0] - x0).max(), np.abs(px).max(initial=0.0),
                                             np.abs(pu).max(initial=0.0)))
    plan = Plan(z, v, px, pu, sol.Phi, sol.tau)
    margins = {"constraints": float(-(tightened_values(plan, sp_.H, sp_.b).max() + sp_.backoff)),
               "tau": float((sol.tau - tau_norms(plan)).min())}
    if sp_.tau_on:
        margins["g_epigraph"] = float((g - sol.tau ** 2).min())
    if sp_.Hf is not None:
        y = z[T] + px[T]
        spread = np.abs(sp_.Hf @ Px[T, :T]).sum(axis=(0, 2))
        margins["terminal"] = float(-(sp_.Hf @ y + sp_.bf + spread + sp_.backoff).max())
    if sp_.terminal_eq:
        res["terminal_state"] = float(np.abs(z[T]).max())
    return PlanReport(res, margins, eq_tol, ineq_tol)


def _make_consistent(sp_: ConvexSubproblem, Phi_u, g, tau, psi):
    mu = sp_.mu if sp_.tau_on else np.zeros(sp_.n)
    return consistent_responses(sp_.A, sp_.B, sp_.e, mu, Phi_u, tau, psi, g)


# ---------------------------------------------------------------------------
# sparse assembly helpers


class _Vars:
    def __init__(self):
        self.n = 0

    def new(self, *shape) -> np.ndarray:
        size = int(np.prod(shape)) if shape else 1
        idx = np.arange(self.n, self.n + size).reshape(shape)
        self.n += size
        return idx


class _Rows:
    """Accumulates sparse rows ``sum_j a_ij x_j (op) rhs_i`` in triplet form.

    Values given as callables of the subproblem are data slots: they keep
    their zeros so the sparsity pattern stays fixed, and :meth:`refill`
    re-evaluates them for another subproblem with the same structure.
    """

    def __init__(self, sp_=None):
        self.sp = sp_
        self.r, self.c, self.v, self.rhs = [], [], [], []
        self.slots, self.rhs_slots = [], []
        self.n = 0
        self.nnz = 0

    def block(self, nrows: int, rhs) -> int:
        start = self.n
        self.n += nrows
        if callable(rhs):
            self.rhs_slots.append((start, nrows, rhs))
            rhs = rhs(self.sp)
        self.rhs.append(np.broadcast_to(np.asarray(rhs, dtype=float), (nrows,)).copy())
        return start

    def add(self, rows, cols, vals):
        fn = vals if callable(vals) else None
        if fn is not None:
            vals = fn(self.sp)
        rows, cols, vals = np.broadcast_arrays(np.asarray(rows), np.asarray(cols), np.asarray(vals, float))
        if fn is None:
            keep = vals != 0
            rows, cols, vals = rows[keep], cols[keep], vals[keep]
        else:
            self.slots.append((self.nnz, rows.shape, fn))
        self.r.append(rows.ravel())
        self.c.append(cols.ravel())
        self.v.append(vals.ravel())
        self.nnz += rows.size

    def triplets(self):
        r = np.concatenate(self.r) if self.r else np.zeros(0, int)
        c = np.concatenate(self.c) if self.c else np.zeros(0, int)
        v = np.concatenate(self.v) if self.v else np.zeros(0)
        rhs = np.concatenate(self.rhs) if self.rhs else np.zeros(0)
        return r, c, v, rhs

    def matrix(self, nvar: int):
        r, c, v, rhs = self.triplets()
        return sp.csc_matrix((v, (r, c)), shape=(self.n, nvar)), rhs

    def refill(self, sp_, v: np.ndarray, rhs: np.ndarray) -> None:
        """Overwrite the data slots of ``v`` and ``rhs`` in place."""
        for off, shape, fn in self.slots:
            size = math.prod(shape)
            v[off:off + size].reshape(shape)[...] = fn(sp_)
        for start, nrows, fn in self.rhs_slots:
            rhs[start:start + nrows] = fn(sp_)


def _directions(rows: np.ndarray):
    """Deduplicate rows up to sign and positive scale.

    Returns unit-infinity-norm directions, the direction index of every row
    and its scale.
    """
    dirs, index, scale, keys = [], [], [], {}
    for h in rows:
        s = np.abs(h).max()
        d = h / s
        nz = np.flatnonzero(np.abs(d) > 1e-12)
        if d[nz[0]] < 0:
            d = -d
        key = tuple(np.round(d, 12))
        if key not in keys:
            keys[key] = len(dirs)
            dirs.append(d)
        index.append(keys[key])
        scale.append(s)
    return np.array(dirs), np.array(index, dtype=int), np.array(scale)


@dataclass
class _Assembly:
    P: sp.csc_matrix
    q: np.ndarray
    A: sp.csc_matrix
    b: np.ndarray
    cones: list
    cone_sizes: tuple
    const: float
    idx: dict
    parts: list
    vals: np.ndarray
    order: np.ndarray
    row_offsets: list

    def refill(self, sp_) -> None:
        """Replace the data-dependent entries of ``A`` and ``b`` with those of ``sp_``."""
        nnz = np.cumsum([0] + [R.nnz for R in self.parts])
        for R, v0, r0 in zip(self.parts, nnz, self.row_offsets):
            R.refill(sp_, self.vals[v0:v0 + R.nnz], self.b[r0:r0 + R.n])
        self.A.data[:] = self.vals[self.order]


def _stack_rows(parts, nvar: int):
    """Stack row groups into one CSC matrix, keeping the triplet-to-CSC order."""
    trip = [R.triplets() for R in parts]
    roff = np.cumsum([0] + [R.n for R in parts])
    r = np.concatenate([t[0] + off for t, off in zip(trip, roff)])
    c = np.concatenate([t[1] for t in trip])
    vals = np.concatenate([t[2] for t in trip])
    bvec = np.concatenate([t[3] for t in trip])
    order = np.lexsort((r, c))
    rs, cs = r[order], c[order]
    if np.any((rs[1:] == rs[:-1]) & (cs[1:] == cs[:-1])):
        raise AssertionError("duplicate constraint entries")
    indptr = np.concatenate([[0], np.cumsum(np.bincount(cs, minlength=nvar))])
    A = sp.csc_matrix((vals[order], rs, indptr), shape=(int(roff[-1]), nvar))
    return A, bvec, vals, order, [int(o) for o in roff]


def _assemble(sp_: ConvexSubproblem) -> _Assembly:
    T, n, m = sp_.T, sp_.n, sp_.m
    nm = n + m
    V = _Vars()
    z = V.new(T + 1, n)
    v = V.new(T, m)
    if sp_.psi_free:
        px = V.new(T + 1, n)
        pu = V.new(T, m)
    IU = {(k, j): V.new(m, n) for k in range(1, T) for j in range(k)}
    IX = {(k, j): V.new(n, n) for k in range(2, T + 1) for j in range(k - 1)}
    tau_on = sp_.tau_on
    if tau_on:
        g = V.new(T)
        tau = V.new(T)
    mu = sp_.mu

    def phi_expr(k, j, D):
        """Triplets for ``D @ Phi_{k,j}``: rows ``(d, c)`` flattened, plus constants."""
        nd, dim = D.shape
        rows, cols, vals = [], [], []
        base = (np.arange(nd)[:, None] * n + np.arange(n)[None, :])          # (nd, n)
        const = np.zeros((nd, n))
        gco = np.zeros((nd, n))
        if k >= j + 2:
            cidx = IX[(k, j)]                                                # (r, c)
            rows.append(np.broadcast_to(base[:, :, None], (nd, n, n)))
            cols.append(np.broadcast_to(cidx.T[None], (nd, n, n)))
            vals.append(np.broadcast_to(D[:, None, :n], (nd, n, n)))
        else:
            const = D[:, :n] * sp_.e[j][None, :]
            gco = D[:, :n] * mu[None, :]
        if dim > n and k <= T - 1:
            cidx = IU[(k, j)]
            rows.append(np.broadcast_to(base[:, :, None], (nd, n, m)))
            cols.append(np.broadcast_to(cidx.T[None], (nd, n, m)))
            vals.append(np.broadcast_to(D[:, None, n:], (nd, n, m)))
        return rows, cols, vals, const.ravel(), gco.ravel()

    EQ, IN = _Rows(sp_), _Rows(sp_)

    # nominal dynamics and initial condition
    eye_n = np.eye(n)
    for k in range(T):
        negA = lambda s, k=k: -s.A[k]
        negB = lambda s, k=k: -s.B[k]
        r0 = EQ.block(n, lambda s, k=k: s.c[k])
        rr = r0 + np.arange(n)
        EQ.add(rr, z[k + 1], 1.0)
        EQ.add(rr[:, None], z[k][None, :], negA)
        EQ.add(rr[:, None], v[k][None, :], negB)
        if sp_.psi_free:
            r0 = EQ.block(n, 0.0)
            rr = r0 + np.arange(n)
            EQ.add(rr, px[k + 1], 1.0)
            EQ.add(rr[:, None], px[k][None, :], negA)
            EQ.add(rr[:, None], pu[k][None, :], negB)
    r0 = EQ.block(n, lambda s: s.x0)
    EQ.add(r0 + np.arange(n), z[0], 1.0)
    if sp_.psi_free:
        EQ.add(r0 + np.arange(n), px[0], 1.0)
    if sp_.terminal_eq:
        r0 = EQ.block(n, 0.0)
        EQ.add(r0 + np.arange(n), z[T], 1.0)

    # response dynamics: X_{k+1,j} - A_k X_{k,j} - B_k U_{k,j} = 0 for k >= j+1
    for j in range(T):
        for k in range(j + 1, T):
            if k == j + 1:
                rhs = lambda s, k=k, j=j: (s.A[k] * s.e[j][None, :]).ravel()   # A[a, c] e_c
            else:
                rhs = 0.0
            r0 = EQ.block(n * n, rhs)
            rr = (r0 + np.arange(n * n)).reshape(n, n)                       # (a, c)
            EQ.add(rr, IX[(k + 1, j)], 1.0)
            if k == j + 1:
                if tau_on:
                    EQ.add(rr, g[j], lambda s, k=k: -s.A[k] * s.mu[None, :])
            else:
                # -A[a, b] X[b, c]
                EQ.add(rr[:, :, None], IX[(k, j)].T[None, :, :],
                       lambda s, k=k: -s.A[k][:, None, :])
            EQ.add(rr[:, :, None], IU[(k, j)].T[None, :, :], lambda s, k=k: -s.B[k][:, None, :])

    # epigraph variables for every (direction, k, j, c)
    rows_all = [sp_.H]
    if tau_on:
        rows_all.append(np.eye(nm))
    D, didx, dscale = _directions(np.vstack(rows_all))
    n_dir = D.shape[0]
    EPI = {}
    for k in range(1, T):
        for j in range(k):
            t = V.new(n_dir, n)
            EPI[(k, j)] = t
            rws, cls, vls, const, gco = phi_expr(k, j, D)
            for sign in (1.0, -1.0):
                r0 = IN.block(n_dir * n, -sign * const)
                for rr_, cc_, vv_ in zip(rws, cls, vls):
                    IN.add(r0 + rr_, cc_, sign * vv_)
                if tau_on and k == j + 1:
                    IN.add(r0 + np.arange(n_dir * n), g[j], sign * gco)
                IN.add(r0 + np.arange(n_dir * n), t.ravel(), -1.0)

    def center_terms(r0, Hrows, k):
        nr = Hrows.shape[0]
        rr = r0 + np.arange(nr)
        IN.add(rr[:, None], z[k][None, :], Hrows[:, :n])
        if sp_.psi_free:
            IN.add(rr[:, None], px[k][None, :], Hrows[:, :n])
        if Hrows.shape[1] > n:
            IN.add(rr[:, None], v[k][None, :], Hrows[:, n:])
            if sp_.psi_free:
                IN.add(rr[:, None], pu[k][None, :], Hrows[:, n:])

    # tightened constraints, steps 0 .. T-1
    n_c = sp_.n_c
    hi = didx[:n_c]
    hs = dscale[:n_c]
    for k in range(T):
        r0 = IN.block(n_c, -sp_.b - sp_.backoff)
        center_terms(r0, sp_.H, k)
        for j in range(k):
            t = EPI[(k, j)]
            IN.add((r0 + np.arange(n_c))[:, None], t[hi], hs[:, None])

    # terminal rows
    if sp_.Hf is not None:
        Df, fidx, fscale = _directions(sp_.Hf)
        nf = sp_.n_f
        r0 = IN.block(nf, -sp_.bf - sp_.backoff)
        center_terms(r0, sp_.Hf, T)
        for j in range(T):
            t = V.new(Df.shape[0], n)
            rws, cls, vls, const, gco = phi_expr(T, j, Df)
            for sign in (1.0, -1.0):
                q0 = IN.block(Df.shape[0] * n, -sign * const)
                for rr_, cc_, vv_ in zip(rws, cls, vls):
                    IN.add(q0 + rr_, cc_, sign * vv_)
                if tau_on and T == j + 1:
                    IN.add(q0 + np.arange(Df.shape[0] * n), g[j], sign * gco)
                IN.add(q0 + np.arange(Df.shape[0] * n), t.ravel(), -1.0)
            IN.add((r0 + np.arange(nf))[:, None], t[fidx], fscale[:, None])

    # overbound rows: +-psi_{k,r} + sum_j ||e_r' Phi_{k,j}||_1 <= tau_k
    if tau_on:
        ridx = didx[n_c:]
        rscale = dscale[n_c:]
        signs = (1.0, -1.0) if sp_.psi_free else (1.0,)
        for k in range(T):
            for sgn in signs:
                r0 = IN.block(nm, 0.0)
                rr = r0 + np.arange(nm)
                if sp_.psi_free:
                    IN.add(rr[:n], px[k], sgn)
                    IN.add(rr[n:], pu[k], sgn)
                IN.add(rr, tau[k], -1.0)
                for j in range(k):
                    IN.add(rr[:, None], EPI[(k, j)][ridx], rscale[:, None])

    # trust region
    if sp_.trust is not None:
        for var, name in ((z, "z_ref"), (v, "v_ref")):
            flat = var.ravel()
            r0 = IN.block(flat.size, lambda s, a=name: s.trust + getattr(s, a).ravel())
            IN.add(r0 + np.arange(flat.size), flat, 1.0)
            r0 = IN.block(flat.size, lambda s, a=name: s.trust - getattr(s, a).ravel())
            IN.add(r0 + np.arange(flat.size), flat, -1.0)

    nvar = V.n
    # rotated cone g_j >= tau_j^2 as (g+1, 2 tau, g-1) in the second-order cone
    SO = _Rows(sp_)
    if tau_on:
        for j in range(T):
            r0 = SO.block(3, [1.0, 0.0, -1.0])
            SO.add(r0 + np.arange(3), [g[j], tau[j], g[j]], [-1.0, -2.0, -1.0])

    parts = [EQ, IN, SO]
    A, bvec, vals, order, roff = _stack_rows(parts, nvar)
    cones = [clarabel.ZeroConeT(EQ.n), clarabel.NonnegativeConeT(IN.n)]
    if tau_on:
        cones += [clarabel.SecondOrderConeT(3) for _ in range(T)]

    # objective (1/2 x'Px + q'x + const)
    Pr, Pc, Pv = [], [], []

    def quad(ia, ib, M):
        Pr.append(np.broadcast_to(ia[:, None], M.shape).ravel())
        Pc.append(np.broadcast_to(ib[None, :], M.shape).ravel())
        Pv.append(M.ravel())

    for k in range(T + 1):
        W = 2 * (sp_.Q if k < T else sp_.P)
        blocks = [z[k]] + ([px[k]] if sp_.psi_free else [])
        for ia in blocks:
            for ib in blocks:
                quad(ia, ib, W)
    for k in range(T):
        blocks = [v[k]] + ([pu[k]] if sp_.psi_free else [])
        for ia in blocks:
            for ib in blocks:
                quad(ia, ib, 2 * sp_.R)
    if sp_.psi_free:
        ii = np.concatenate([px.ravel(), pu.ravel()])
        Pr.append(ii), Pc.append(ii), Pv.append(np.full(ii.size, 2 * sp_.psi_reg))
    qvec = np.zeros(nvar)
    const = 0.0
    rr = 2 * sp_.rho_reg
    resp = [a.ravel() for a in IU.values()] + [a.ravel() for a in IX.values()]
    if resp:
        ii = np.concatenate(resp)
        Pr.append(ii), Pc.append(ii), Pv.append(np.full(ii.size, rr))
    if tau_on:
        Pr.append(g), Pc.append(g), Pv.append(np.full(T, rr * np.sum(mu ** 2)))
        qvec[g] += rr * (sp_.e @ mu)
    const += sp_.rho_reg * float(np.sum(sp_.e ** 2))
    Pm = sp.csc_matrix((np.concatenate(Pv), (np.concatenate(Pr), np.concatenate(Pc))),
                       shape=(nvar, nvar))
    Pm = sp.triu(Pm).tocsc()

    idx = {"z": z, "v": v, "IU": IU, "IX": IX}
    if sp_.psi_free:
        idx.update(px=px, pu=pu)
    if tau_on:
        idx.update(g=g, tau=tau)
    return _Assembly(Pm, qvec, A, bvec, cones, (EQ.n, IN.n, SO.n), const, idx,
                     parts, vals, order, roff)


# ---------------------------------------------------------------------------
# generic backend


_STATUS = {
    "Solved": "optimal",
    "AlmostSolved": "optimal",
    "PrimalInfeasible": "infeasible",
    "AlmostPrimalInfeasible": "infeasible",
    "DualInfeasible": "unbounded",
    "MaxIterations": "max_iter",
    "MaxTime": "max_iter",
}


def _clarabel_settings(tol: float, max_iter: int):
    s = clarabel.DefaultSettings()
    s.verbose = False
    s.max_iter = max_iter
    s.tol_gap_abs = tol
    s.tol_gap_rel = tol
    s.tol_feas = tol
    s.tol_ktratio = 1e-8
    s.presolve_enable = False
    s.equilibrate_enable = False
    return s


def _structure_key(sp_: ConvexSubproblem, tol: float, max_iter: int) -> tuple:
    """Everything the assembled program depends on apart from its data slots."""
    arrays = (sp_.H, sp_.b, sp_.Hf, sp_.bf, sp_.e, sp_.mu, sp_.Q, sp_.R, sp_.P)
    return (sp_.T, sp_.n, sp_.m, sp_.rho_reg, sp_.psi_reg, float(sp_.backoff), sp_.psi_free,
            sp_.terminal_eq, sp_.trust is None, tol, max_iter,
            tuple(None if a is None else (a.shape, np.ascontiguousarray(a).tobytes())
                  for a in arrays))


class _SolverCache:
    """Assembled programs and their solvers, reused across same-structure solves."""

    def __init__(self, size: int = 8):
        self.size = size
        self.entries: OrderedDict = OrderedDict()

    def get(self, sp_, tol: float, max_iter: int, key=None, assemble=None):
        key = _structure_key(sp_, tol, max_iter) if key is None else key
        hit = self.entries.get(key)
        if hit is not None:
            self.entries.move_to_end(key)
            asm, solver = hit
            asm.refill(sp_)
            solver.update(A=asm.A.data, b=asm.b)
            return asm, solver
        asm = (assemble or _assemble)(sp_)
        solver = clarabel.DefaultSolver(asm.P, asm.q, asm.A, asm.b, asm.cones,
                                        _clarabel_settings(tol, max_iter))
        self.entries[key] = (asm, solver)
        if len(self.entries) > self.size:
            self.entries.popitem(last=False)
        return asm, solver


_CACHE = _SolverCache()


def solve_generic(sp_: ConvexSubproblem, tol: float = 1e-9, max_iter: int = 200,
                  reuse: bool = True) -> SubproblemSolution:
    """Solve the full subproblem with the interior-point conic solver.

    With ``reuse`` the sparsity pattern and solver workspace of an earlier
    subproblem with the same structure are refilled instead of rebuilt.
    """
    T, n, m = sp_.T, sp_.n, sp_.m
    t0 = time.perf_counter()
    if reuse:
        asm, solver = _CACHE.get(sp_, tol, max_iter)
    else:
        asm = _assemble(sp_)
        solver = clarabel.DefaultSolver(asm.P, asm.q, asm.A, asm.b, asm.cones,
                                        _clarabel_settings(tol, max_iter))
    t1 = time.perf_counter()
    res = solver.solve()
    t2 = time.perf_counter()
    status = _STATUS.get(str(res.status).split(".")[-1], "error")
    timings = {"jac": sp_.jac_time, "assemble": t1 - t0, "qp": t2 - t1, "ricc": 0.0}
    if status not in ("optimal", "max_iter"):
        return _failed(sp_, status, int(res.iterations), timings)
    x = np.asarray(res.x)
    ix = asm.idx
    z = x[ix["z"]]
    v = x[ix["v"]]
    if sp_.psi_free:
        psi_x, psi_u = x[ix["px"]], x[ix["pu"]]
    else:
        psi_x, psi_u = np.zeros((T + 1, n)), np.zeros((T, m))
    Pu = np.zeros((T, T, m, n))
    for (k, j), ii in ix["IU"].items():
        Pu[k, j] = x[ii]
    if sp_.tau_on:
        g, tau = x[ix["g"]], x[ix["tau"]]
    else:
        g, tau = np.zeros(T), np.zeros(T)
    psi = np.concatenate([psi_x[:T], psi_u], axis=1)
    Phi, tau, g = _make_consistent(sp_, Pu, g, tau, psi)
    J = objective(sp_, z, v, psi_x, psi_u, Phi)
    return SubproblemSolution(z, v, psi_x, psi_u, Phi, tau, g, J, status, int(res.iterations),
                              timings, {"solver_objective": float(res.obj_val) + asm.const,
                                        "n_var": asm.P.shape[0], "n_con": asm.A.shape[0]})


def _failed(sp_, status, iters, timings) -> SubproblemSolution:
    T, n, m = sp_.T, sp_.n, sp_.m
    return SubproblemSolution(sp_.z_ref.copy(), sp_.v_ref.copy(), np.zeros((T + 1, n)),
                              np.zeros((T, m)), SystemResponse.zeros(T, n, m), np.zeros(T),
                              np.zeros(T), np.inf, status, iters, timings)


def dump_triplets(sp_: ConvexSubproblem, path) -> None:
    """Write the assembled conic program as plain-text triplets.

    Sections ``P`` (upper triangle), ``q``, ``A``, ``b`` and ``cones``; matrix
    entries are ``row col value`` lines with zero-based indices.
    """
    asm = _assemble(sp_)
    with open(path, "w") as fh:
        fh.write(f"# rnmpc conic program: minimise 1/2 x'Px + q'x + {float(asm.const)!r}"
                 " s.t. Ax + s = b, s in cones\n")
        fh.write(f"n {asm.P.shape[0]}\nm {asm.A.shape[0]}\n")
        for name, M in (("P", asm.P), ("A", asm.A)):
            C = M.tocoo()
            fh.write(f"{name} {C.nnz}\n")
            for r, c, val in zip(C.row, C.col, C.data):
                fh.write(f"{int(r)} {int(c)} {float(val)!r}\n")
        for name, vec in (("q", asm.q), ("b", asm.b)):
            fh.write(f"{name} {vec.size}\n")
            fh.write("\n".join(repr(float(t)) for t in vec) + "\n")
        zero, nonneg, soc = asm.cone_sizes
        fh.write(f"cones zero {zero} nonneg {nonneg} soc3 {soc // 3}\n")


# ---------------------------------------------------------------------------
# nominal QP with fixed responses


class NominalSolution(NamedTuple):
    z: np.ndarray
    v: np.ndarray
    psi_x: np.ndarray
    psi_u: np.ndarray
    status: str
    seconds: float
    lam: np.ndarray        # multipliers of the tightened rows (T, n_c)
    lam_f: np.ndarray      # multipliers of the terminal rows (n_f,)


@dataclass
class _NominalData:
    """Subproblem plus the tightening constants of one nominal solve."""

    sp: ConvexSubproblem
    kappa: np.ndarray
    kf: np.ndarray
    room: np.ndarray | None


def _tightening(sp_: ConvexSubproblem, Phi: SystemResponse | None, tau):
    T, nm = sp_.T, sp_.n + sp_.m
    if Phi is None:
        return np.zeros((T, sp_.n_c)), np.zeros(sp_.n_f), None
    S = Phi.stacked()
    kappa = np.abs(sp_.H @ S).sum(axis=(1, 3))
    kf = np.zeros(sp_.n_f)
    if sp_.Hf is not None:
        kf = np.abs(sp_.Hf @ Phi.Phi_x[sp_.T]).sum(axis=(0, 2))
    room = None
    if sp_.psi_free and sp_.tau_on and tau is not None:
        rows = np.abs(S).sum(axis=(1, 3))
        room = np.maximum(np.asarray(tau)[:, None] - rows, 0.0)
    return kappa, kf, room


def _assemble_nominal(d: _NominalData) -> _Assembly:
    sp_ = d.sp
    T, n, m = sp_.T, sp_.n, sp_.m
    nm = n + m
    V = _Vars()
    z = V.new(T + 1, n)
    v = V.new(T, m)
    if sp_.psi_free:
        px = V.new(T + 1, n)
        pu = V.new(T, m)
    EQ, IN = _Rows(d), _Rows(d)
    for k in range(T):
        negA = lambda s, k=k: -s.sp.A[k]
        negB = lambda s, k=k: -s.sp.B[k]
        rr = EQ.block(n, lambda s, k=k: s.sp.c[k]) + np.arange(n)
        EQ.add(rr, z[k + 1], 1.0)
        EQ.add(rr[:, None], z[k][None, :], negA)
        EQ.add(rr[:, None], v[k][None, :], negB)
        if sp_.psi_free:
            rr = EQ.block(n, 0.0) + np.arange(n)
            EQ.add(rr, px[k + 1], 1.0)
            EQ.add(rr[:, None], px[k][None, :], negA)
            EQ.add(rr[:, None], pu[k][None, :], negB)
    rr = EQ.block(n, lambda s: s.sp.x0) + np.arange(n)
    EQ.add(rr, z[0], 1.0)
    if sp_.psi_free:
        EQ.add(rr, px[0], 1.0)
    if sp_.terminal_eq:
        EQ.add(EQ.block(n, 0.0) + np.arange(n), z[T], 1.0)

    def center(rr, Hr, k):
        IN.add(rr[:, None], z[k][None, :], Hr[:, :n])
        if sp_.psi_free:
            IN.add(rr[:, None], px[k][None, :], Hr[:, :n])
        if Hr.shape[1] > n:
            IN.add(rr[:, None], v[k][None, :], Hr[:, n:])
            if sp_.psi_free:
                IN.add(rr[:, None], pu[k][None, :], Hr[:, n:])

    for k in range(T):
        rr = IN.block(sp_.n_c, lambda s, k=k: -s.sp.b - s.sp.backoff - s.kappa[k]) + np.arange(sp_.n_c)
        center(rr, sp_.H, k)
    if sp_.Hf is not None:
        rr = IN.block(sp_.n_f, lambda s: -s.sp.bf - s.sp.backoff - s.kf) + np.arange(sp_.n_f)
        center(rr, sp_.Hf, T)
    if d.room is not None:
        for k in range(T):
            for sgn in (1.0, -1.0):
                rr = IN.block(nm, lambda s, k=k: s.room[k]) + np.arange(nm)
                IN.add(rr[:n], px[k], sgn)
                IN.add(rr[n:], pu[k], sgn)
    if sp_.trust is not None:
        for var, name in ((z, "z_ref"), (v, "v_ref")):
            flat = var.ravel()
            rr = IN.block(flat.size, lambda s, a=name: s.sp.trust + getattr(s.sp, a).ravel())
            IN.add(rr + np.arange(flat.size), flat, 1.0)
            rr = IN.block(flat.size, lambda s, a=name: s.sp.trust - getattr(s.sp, a).ravel())
            IN.add(rr + np.arange(flat.size), flat, -1.0)

    nvar = V.n
    Pr, Pc, Pv = [], [], []
    for k in range(T + 1):
        W = 2 * (sp_.Q if k < T else sp_.P)
        blocks = [z[k]] + ([px[k]] if sp_.psi_free else [])
        for ia in blocks:
            for ib in blocks:
                Pr.append(np.repeat(ia, n)), Pc.append(np.tile(ib, n)), Pv.append(W.ravel())
    for k in range(T):
        blocks = [v[k]] + ([pu[k]] if sp_.psi_free else [])
        for ia in blocks:
            for ib in blocks:
                Pr.append(np.repeat(ia, m)), Pc.append(np.tile(ib, m)), Pv.append(2 * sp_.R.ravel())
    if sp_.psi_free:
        ii = np.concatenate([px.ravel(), pu.ravel()])
        Pr.append(ii), Pc.append(ii), Pv.append(np.full(ii.size, 2 * sp_.psi_reg))
    Pm = sp.triu(sp.csc_matrix((np.concatenate(Pv), (np.concatenate(Pr), np.concatenate(Pc))),
                               shape=(nvar, nvar))).tocsc()
    A, bvec, vals, order, roff = _stack_rows([EQ, IN], nvar)
    cones = [clarabel.ZeroConeT(EQ.n), clarabel.NonnegativeConeT(IN.n)]
    idx = {"z": z, "v": v}
    if sp_.psi_free:
        idx.update(px=px, pu=pu)
    return _Assembly(Pm, np.zeros(nvar), A, bvec, cones, (EQ.n, IN.n, 0), 0.0, idx,
                     [EQ, IN], vals, order, roff)


_NOMINAL_CACHE = _SolverCache()


def solve_nominal(sp_: ConvexSubproblem, Phi: SystemResponse | None = None,
                  tau: np.ndarray | None = None, tol: float = 1e-9) -> NominalSolution:
    """Optimise ``(z, v, psi)`` for fixed responses and overbounds.

    With ``Phi = None`` the responses are taken as zero.  With ``tau`` the
    correction ``psi`` is boxed by the room the responses leave under
    ``tau``.
    """
    T, n, m = sp_.T, sp_.n, sp_.m
    kappa, kf, room = _tightening(sp_, Phi, tau)
    d = _NominalData(sp_, kappa, kf, room)
    t0 = time.perf_counter()
    asm, solver = _NOMINAL_CACHE.get(d, tol, 200, key=_structure_key(sp_, tol, 200) + (room is None,),
                                     assemble=_assemble_nominal)
    res = solver.solve()
    secs = time.perf_counter() - t0
    status = _STATUS.get(str(res.status).split(".")[-1], "error")
    x = np.asarray(res.x)
    ix = asm.idx
    zz, vv = x[ix["z"]], x[ix["v"]]
    if sp_.psi_free:
        pxx, puu = x[ix["px"]], x[ix["pu"]]
    else:
        pxx, puu = np.zeros((T + 1, n)), np.zeros((T, m))
    y = np.asarray(res.z)[asm.cone_sizes[0]:]
    lam = y[:T * sp_.n_c].reshape(T, sp_.n_c)
    lam_f = y[T * sp_.n_c:T * sp_.n_c + sp_.n_f] if sp_.Hf is not None else np.zeros(0)
    return NominalSolution(zz, vv, pxx, puu, status, secs, lam, lam_f)


# ---------------------------------------------------------------------------
# structured backend


def _stage_weights(W: np.ndarray, T: int, n: int):
    """Split ``W`` (shared, or one per step) into contiguous per-step Riccati blocks."""
    W = np.broadcast_to(W, (T,) + W.shape[-2:])
    return (np.ascontiguousarray(W[:, :n, :n]), np.ascontiguousarray(W[:, :n, n:]),
            np.ascontiguousarray(W[:, n:, n:]))


@dataclass
class AdmmSettings:
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    rho_eq_scale: float = 1e3
    eps_abs: float = 1e-7
    eps_rel: float = 1e-7
    max_iter: int = 20000
    adapt_every: int = 25
    check_every: int = 5


class _WSpace:
    """Flat storage of the splitting variables with named views."""

    def __init__(self, shapes: dict):
        self.slices = {}
        off = 0
        for name, shape in shapes.items():
            size = int(np.prod(shape))
            self.slices[name] = (slice(off, off + size), shape)
            off += size
        self.size = off

    def view(self, vec, name):
        s, shape = self.slices[name]
        return vec[s].reshape(shape)

    def pack(self, parts: dict) -> np.ndarray:
        out = np.zeros(self.size)
        for name, arr in parts.items():
            s, _ = self.slices[name]
            out[s] = np.ravel(arr)
        return out


def _proj_l1_cone(t0: np.ndarray, q: np.ndarray):
    """Project ``(t0, q)`` (batched, ``q`` of shape ``(N, L)``) onto ``{||q||_1 <= t}``."""
    a = np.abs(q)
    norm = a.sum(axis=1)
    t = t0.copy()
    qo = q.copy()
    inside = norm <= t0
    amax = a.max(axis=1) if a.shape[1] else np.zeros_like(t0)
    polar = (~inside) & (amax <= -t0)
    t[polar] = 0.0
    qo[polar] = 0.0
    rest = ~(inside | polar)
    if np.any(rest):
        ar = a[rest]
        srt = -np.sort(-ar, axis=1)
        cs = np.cumsum(srt, axis=1)
        cnt = np.arange(1, ar.shape[1] + 1)
        lam_all = (cs - t0[rest, None]) / (cnt + 1)
        ok = srt > lam_all
        last = ar.shape[1] - 1 - np.argmax(ok[:, ::-1], axis=1)
        lam = lam_all[np.arange(ar.shape[0]), last]
        qo[rest] = np.sign(q[rest]) * np.maximum(ar - lam[:, None], 0.0)
        t[rest] = t0[rest] + lam
    return t, qo


def _proj_parabola(t0: np.ndarray, g0: np.ndarray):
    """Project ``(t0, g0)`` onto ``{g >= t^2}`` (elementwise)."""
    t = t0.copy()
    g = g0.copy()
    out = g0 < t0 ** 2
    if np.any(out):
        a = np.abs(t0[out])
        gg = g0[out]
        # root of 2 s^3 + (1 - 2 g0) s - |t0| = 0 in (0, |t0|]; Newton from the right
        s = a.copy()
        for _ in range(60):
            h = 2 * s ** 3 + (1 - 2 * gg) * s - a
            d = 6 * s ** 2 + 1 - 2 * gg
            step = h / d
            s = s - step
            if np.all(np.abs(step) <= 1e-15 * (1 + a)):
                break
        t[out] = np.sign(t0[out]) * s
        g[out] = s ** 2
    return t, g


class _Structured:
    """Splitting method with Riccati-based linear-system solves."""

    def __init__(self, sp_: ConvexSubproblem, st: AdmmSettings):
        self.sp = sp_
        self.st = st
        T, n, m = sp_.T, sp_.n, sp_.m
        nm = n + m
        self.nm = nm
        shapes = {"e_nom": (T, sp_.n_c), "e_phi": (T, T, sp_.n_c, n)}
        if sp_.Hf is not None:
            shapes.update(f_nom=(sp_.n_f,), f_phi=(T, sp_.n_f, n))
        if sp_.tau_on:
            shapes.update(g_tau=(T, nm), g_psi=(T, nm), g_phi=(T, T, nm, n), p=(T, 2))
        if sp_.trust is not None:
            shapes.update(tr_z=(T + 1, n), tr_v=(T, m))
        if sp_.terminal_eq:
            shapes.update(eq=(n,))
        self.W = _WSpace(shapes)
        self.mask = causal_mask(T)
        self.timings = {"ricc": 0.0, "qp": 0.0, "proj": 0.0, "factor": 0.0}
        self.factor(st.rho)

    # -- linear operator -------------------------------------------------
    def rho_vec(self, rho):
        r = np.full(self.W.size, rho)
        if "eq" in self.W.slices:
            r[self.W.slices["eq"][0]] = rho * self.st.rho_eq_scale
        return r

    def apply_M(self, X) -> np.ndarray:
        sp_ = self.sp
        T, n = sp_.T, sp_.n
        z, v, px, pu, S, tau, g = X
        y = np.concatenate([z[:T] + px[:T], v + pu], axis=1)
        parts = {"e_nom": y @ sp_.H.T, "e_phi": np.matmul(sp_.H, S[:T])}
        if sp_.Hf is not None:
            parts["f_nom"] = sp_.Hf @ (z[T] + px[T])
            parts["f_phi"] = np.matmul(sp_.Hf, S[T, :, :n])
        if sp_.tau_on:
            parts["g_tau"] = np.repeat(tau[:, None], self.nm, axis=1)
            parts["g_psi"] = np.concatenate([px[:T], pu], axis=1)
            parts["g_phi"] = S[:T]
            parts["p"] = np.stack([tau, g], axis=1)
        if sp_.trust is not None:
            parts["tr_z"] = z
            parts["tr_v"] = v
        if sp_.terminal_eq:
            parts["eq"] = z[T]
        return self.W.pack(parts)

    def apply_MT(self, w):
        sp_ = self.sp
        T, n, m = sp_.T, sp_.n, sp_.m
        W = self.W
        gz = np.zeros((T + 1, n))
        gv = np.zeros((T, m))
        gpx = np.zeros((T + 1, n))
        gpu = np.zeros((T, m))
        gS = np.zeros((T + 1, T, self.nm, n))
        gtau = np.zeros(T)
        gg = np.zeros(T)
        gy = W.view(w, "e_nom") @ sp_.H
        gS[:T] = np.matmul(sp_.H.T, W.view(w, "e_phi"))
        if sp_.Hf is not None:
            gf = sp_.Hf.T @ W.view(w, "f_nom")
            gz[T] += gf
            gpx[T] += gf
            gS[T, :, :n] = np.matmul(sp_.Hf.T, W.view(w, "f_phi"))
        gz[:T] += gy[:, :n]
        gpx[:T] += gy[:, :n]
        gv += gy[:, n:]
        gpu += gy[:, n:]
        if sp_.tau_on:
            gps = W.view(w, "g_psi")
            gpx[:T] += gps[:, :n]
            gpu += gps[:, n:]
            gS[:T] += W.view(w, "g_phi")
            p = W.view(w, "p")
            gtau = W.view(w, "g_tau").sum(axis=1) + p[:, 0]
            gg = p[:, 1].copy()
        if sp_.trust is not None:
            gz += W.view(w, "tr_z")
            gv += W.view(w, "tr_v")
        if sp_.terminal_eq:
            gz[T] += W.view(w, "eq")
        gS[:T] *= self.mask[:, :, None, None]
        gS[T, :, n:] = 0.0
        return gz, gv, gpx, gpu, gS, gtau, gg

    # -- projection ------------------------------------------------------
    def project(self, w) -> np.ndarray:
        sp_ = self.sp
        T, n = sp_.T, sp_.n
        W = self.W
        out = w.copy()
        en = W.view(out, "e_nom")
        ep = W.view(out, "e_phi")
        beta = -sp_.b - sp_.backoff
        # cone for (k, i): r + ||q||_1 <= beta
        q = ep.transpose(0, 2, 1, 3).reshape(T * sp_.n_c, T * n)
        t0 = (beta[None, :] - en).ravel()
        t, qn = _proj_l1_cone(t0, q)
        en[...] = beta[None, :] - t.reshape(T, sp_.n_c)
        ep[...] = qn.reshape(T, sp_.n_c, T, n).transpose(0, 2, 1, 3)
        ep *= self.mask[:, :, None, None]
        if sp_.Hf is not None:
            fn = W.view(out, "f_nom")
            fp = W.view(out, "f_phi")
            betaf = -sp_.bf - sp_.backoff
            q = fp.transpose(1, 0, 2).reshape(sp_.n_f, T * n)
            t, qn = _proj_l1_cone(betaf - fn, q)
            fn[...] = betaf - t
            fp[...] = qn.reshape(sp_.n_f, T, n).transpose(1, 0, 2)
        if sp_.tau_on:
            gt = W.view(out, "g_tau")
            gps = W.view(out, "g_psi")
            gph = W.view(out, "g_phi")
            nm = self.nm
            body = gph.transpose(0, 2, 1, 3).reshape(T * nm, T * n)
            cols = [body]
            if sp_.psi_free:
                cols.insert(0, gps.reshape(T * nm, 1))
            q = np.concatenate(cols, axis=1)
            t, qn = _proj_l1_cone(gt.ravel(), q)
            gt[...] = t.reshape(T, nm)
            if sp_.psi_free:
                gps[...] = qn[:, 0].reshape(T, nm)
                qn = qn[:, 1:]
            else:
                gps[...] = 0.0
            gph[...] = qn.reshape(T, nm, T, n).transpose(0, 2, 1, 3)
            gph *= self.mask[:, :, None, None]
            p = W.view(out, "p")
            p[:, 0], p[:, 1] = _proj_parabola(p[:, 0].copy(), p[:, 1].copy())
        if sp_.trust is not None:
            tz = W.view(out, "tr_z")
            tv = W.view(out, "tr_v")
            np.clip(tz, sp_.z_ref - sp_.trust, sp_.z_ref + sp_.trust, out=tz)
            np.clip(tv, sp_.v_ref - sp_.trust, sp_.v_ref + sp_.trust, out=tv)
        if sp_.terminal_eq:
            W.view(out, "eq")[...] = 0.0
        return out

    # -- factorisation ---------------------------------------------------
    def factor(self, rho):
        t0 = time.perf_counter()
        sp_ = self.sp
        st = self.st
        T, n, m = sp_.T, sp_.n, sp_.m
        nm = self.nm
        self.rho = rho
        rg = rho if sp_.tau_on else 0.0
        # response columns
        Wk = rho * sp_.H.T @ sp_.H + (rg + 2 * sp_.rho_reg + st.sigma) * np.eye(nm)
        WT = (2 * sp_.rho_reg + st.sigma) * np.eye(n)
        if sp_.Hf is not None:
            WT = WT + rho * sp_.Hf.T @ sp_.Hf
        self.cP, self.cK, self.cGi = _kernels.lq_factor(sp_.A, sp_.B, *_stage_weights(Wk, T, n), WT, 1)
        self.g_quad = rho + st.sigma
        self.tau_quad = rho * nm + rho + st.sigma
        # nominal problem over xi = (z, psi_x), u = (v, psi_u)
        pf = sp_.psi_free
        nx = 2 * n if pf else n
        nu = 2 * m if pf else m
        Lx = np.hstack([np.eye(n), np.eye(n)]) if pf else np.eye(n)
        Lu = np.hstack([np.eye(m), np.eye(m)]) if pf else np.eye(m)
        L = np.block([[Lx, np.zeros((n, nu))], [np.zeros((m, nx)), Lu]])
        Wc = np.block([[2 * sp_.Q, np.zeros((n, m))], [np.zeros((m, n)), 2 * sp_.R]])
        Ws = L.T @ (Wc + rho * sp_.H.T @ sp_.H) @ L + st.sigma * np.eye(nx + nu)
        dg = np.zeros(nx + nu)
        if pf:
            dg[n:nx] += 2 * sp_.psi_reg
            dg[nx + m:] += 2 * sp_.psi_reg
        if sp_.tau_on and pf:
            dg[n:nx] += rho
            dg[nx + m:] += rho
        if sp_.trust is not None:
            dg[:n] += rho
            dg[nx:nx + m] += rho
        Ws += np.diag(dg)
        WfT = 2 * sp_.P
        if sp_.Hf is not None:
            WfT = WfT + rho * sp_.Hf.T @ sp_.Hf
        WTn = Lx.T @ WfT @ Lx + st.sigma * np.eye(nx)
        dT = np.zeros(nx)
        if pf:
            dT[n:] += 2 * sp_.psi_reg
        if sp_.terminal_eq:
            dT[:n] += rho * st.rho_eq_scale
        if sp_.trust is not None:
            dT[:n] += rho
        WTn += np.diag(dT)
        Ab = np.zeros((T, nx, nx))
        Bb = np.zeros((T, nx, nu))
        Ab[:, :n, :n] = sp_.A
        Bb[:, :n, :m] = sp_.B
        if pf:
            Ab[:, n:, n:] = sp_.A
            Bb[:, n:, m:] = sp_.B
        self.nAb, self.nBb = Ab, Bb
        self.nc = np.zeros((T, nx))
        self.nc[:, :n] = sp_.c
        self.nP, self.nK, self.nGi = _kernels.lq_factor(Ab, Bb, *_stage_weights(Ws, T, nx), WTn, 0)
        self.nx, self.nu = nx, nu
        self.timings["factor"] += time.perf_counter() - t0

    # -- x-update --------------------------------------------------------
    def x_update(self, X, d_scaled):
        """Minimise the augmented Lagrangian in ``x``; ``d_scaled = rho .* (w - y/rho)``."""
        sp_ = self.sp
        st = self.st
        T, n, m = sp_.T, sp_.n, sp_.m
        z, v, px, pu, S, tau, g = X
        gz, gv, gpx, gpu, gS, gtau, gg = self.apply_MT(d_scaled)
        t0 = time.perf_counter()
        # response columns
        Lin = -st.sigma * S - gS
        Lx = np.ascontiguousarray(Lin[:T, :, :n])
        Lu = np.ascontiguousarray(Lin[:T, :, n:])
        LxT = np.ascontiguousarray(Lin[T, :, :n])
        g_lin = -st.sigma * g - gg
        Xo = np.zeros((T + 1, T, n, n))
        Uo = np.zeros((T, T, m, n))
        go = np.zeros(T)
        _kernels.column_sweep(sp_.A, sp_.B, self.cP, self.cK, self.cGi, Lx, Lu, LxT,
                              sp_.e, sp_.mu, g_lin, self.g_quad, sp_.tau_on, Xo, Uo, go)
        S_new = np.concatenate([Xo, np.concatenate([Uo, np.zeros((1, T, m, n))])], axis=2)
        t1 = time.perf_counter()
        tau_new = (st.sigma * tau + gtau) / self.tau_quad if sp_.tau_on else tau
        # nominal
        pf = sp_.psi_free
        if pf:
            lx = -st.sigma * np.concatenate([z, px], axis=1) - np.concatenate([gz, gpx], axis=1)
            lu = -st.sigma * np.concatenate([v, pu], axis=1) - np.concatenate([gv, gpu], axis=1)
        else:
            lx = -st.sigma * z - gz
            lu = -st.sigma * v - gv
        kff, p = _kernels.nominal_sweep(self.nAb, self.nBb, self.nc, self.nP, self.nK, self.nGi,
                                        np.ascontiguousarray(lx), np.ascontiguousarray(lu), 0)
        if pf:
            G = np.vstack([np.eye(n), -np.eye(n)])
            g0 = np.concatenate([np.zeros(n), sp_.x0])
            P0 = self.nP[0]
            z0 = -np.linalg.solve(G.T @ P0 @ G, G.T @ (P0 @ g0 + p[0]))
            xi0 = G @ z0 + g0
        else:
            xi0 = sp_.x0.copy()
        xi, uu = _kernels.nominal_forward(self.nAb, self.nBb, self.nc, self.nK, kff, xi0)
        if pf:
            out = (xi[:, :n], uu[:, :m], xi[:, n:], uu[:, m:], S_new, tau_new, go)
        else:
            out = (xi, uu, np.zeros((T + 1, n)), np.zeros((T, m)), S_new, tau_new, go)
        t2 = time.perf_counter()
        self.timings["ricc"] += t1 - t0
        self.timings["qp"] += t2 - t1
        return out


def _initial_point(sp_: ConvexSubproblem):
    T, n, m = sp_.T, sp_.n, sp_.m
    ref = sp_.ref
    if ref is not None:
        S = np.concatenate([ref.Phi.Phi_x, np.concatenate([ref.Phi.Phi_u, np.zeros((1, T, m, n))])],
                           axis=2)
        tau = ref.tau.copy()
        px, pu = (ref.psi_x.copy(), ref.psi_u.copy()) if sp_.psi_free else \
            (np.zeros((T + 1, n)), np.zeros((T, m)))
        return (ref.z.copy(), ref.v.copy(), px, pu, S, tau, tau ** 2)
    S = np.zeros((T + 1, T, n + m, n))
    return (sp_.z_ref.copy(), sp_.v_ref.copy(), np.zeros((T + 1, n)), np.zeros((T, m)), S,
            np.zeros(T), np.zeros(T))


def solve_structured(sp_: ConvexSubproblem, settings: AdmmSettings | None = None,
                     warm=None) -> SubproblemSolution:
    """Solve the subproblem with the Riccati-based splitting method.

    ``warm`` may be a previous ``(x, y)`` state returned in ``info["state"]``.
    After convergence the responses are re-propagated exactly, the overbounds
    are made consistent and the nominal part is re-solved exactly with the
    responses held fixed.
    """
    st = settings or AdmmSettings()
    T, n, m = sp_.T, sp_.n, sp_.m
    S_ = _Structured(sp_, st)
    W = S_.W
    if warm is not None:
        X, y = warm
    else:
        X = _initial_point(sp_)
        y = np.zeros(W.size)
    w = S_.project(S_.apply_M(X))
    rho_v = S_.rho_vec(S_.rho)
    status = "max_iter"
    it = 0
    a = st.alpha
    for it in range(1, st.max_iter + 1):
        Xt = S_.x_update(X, rho_v * w - y)
        t0 = time.perf_counter()
        Mxt = S_.apply_M(Xt)
        X = tuple(a * xt + (1 - a) * xk for xt, xk in zip(Xt, X))
        w_prev = w
        w_hat = a * Mxt + (1 - a) * w
        w = S_.project(w_hat + y / rho_v)
        y = y + rho_v * (w_hat - w)
        S_.timings["proj"] += time.perf_counter() - t0
        if it % st.check_every == 0 or it == st.max_iter:
            Mx = S_.apply_M(X)
            r_p = np.abs(Mx - w).max()
            gd = S_.apply_MT(rho_v * (w - w_prev))
            r_d = max(np.abs(t).max() for t in gd)
            MTy = max(np.abs(t).max() for t in S_.apply_MT(y))
            eps_p = st.eps_abs + st.eps_rel * max(np.abs(Mx).max(), np.abs(w).max())
            eps_d = st.eps_abs + st.eps_rel * MTy
            if r_p <= eps_p and r_d <= eps_d:
                status = "optimal"
                break
            if st.adapt_every and it % st.adapt_every == 0:
                ratio = np.sqrt((r_p / max(eps_p, 1e-300)) / max(r_d / max(eps_d, 1e-300), 1e-300))
                if ratio > 5 or ratio < 0.2:
                    new_rho = float(np.clip(S_.rho * ratio, 1e-6, 1e6))
                    S_.factor(new_rho)
                    rho_v = S_.rho_vec(new_rho)
    z, v, px, pu, S, tau, g = X
    Pu = S[:T, :, n:]
    psi = np.concatenate([px[:T], pu], axis=1)
    t0 = time.perf_counter()
    Phi, tau, g = _make_consistent(sp_, Pu, g, tau, psi)
    zz, vv, pxx, puu, nstat = solve_nominal(sp_, Phi, tau)[:5]
    S_.timings["qp"] += time.perf_counter() - t0
    timings = {"jac": sp_.jac_time, **S_.timings}
    if nstat != "optimal":
        return _failed(sp_, "infeasible" if nstat == "infeasible" else nstat, it, timings)
    J = objective(sp_, zz, vv, pxx, puu, Phi)
    return SubproblemSolution(zz, vv, pxx, puu, Phi, tau, g, J, status, it, timings,
                              {"state": (X, y), "rho": S_.rho})


# ---------------------------------------------------------------------------
# alternation backend


@dataclass(frozen=True)
class AlternationSettings:
    """Alternation between the nominal QP and the response columns.

    ``passes`` bounds the number of (columns, nominal QP) rounds; one pass
    is the real-time variant.  ``fixed_point`` rounds reconcile the
    diagonal error bound with the overbound it depends on.  ``base_weight``
    scales the stage cost used as column weight before multipliers exist.
    """

    passes: int = 8
    obj_tol: float = 1e-8
    fixed_point: int = 3
    base_weight: float = 1.0
    max_weight: float = 1e6
    shrink_tries: int = 4


def _column_weights(sp_: ConvexSubproblem, Phi: SystemResponse | None, lam, lam_f,
                    st: AlternationSettings):
    """Per-step column weights: stage cost plus reweighted active tightened rows.

    A tightening term ``lam |a|`` is replaced by its quadratic majorant
    ``lam a^2 / (2 |a0|)`` at the current response magnitude ``|a0|``.
    """
    T, n, m = sp_.T, sp_.n, sp_.m
    nm = n + m
    base = np.zeros((nm, nm))
    base[:n, :n] = sp_.Q
    base[n:, n:] = sp_.R
    W = np.broadcast_to(2 * st.base_weight * base + 2 * sp_.rho_reg * np.eye(nm), (T, nm, nm)).copy()
    WT = 2 * st.base_weight * sp_.P + 2 * sp_.rho_reg * np.eye(n)
    if Phi is None or lam is None:
        return W, WT
    cap = st.max_weight * (1.0 + np.abs(W[0]).max())
    S = Phi.stacked()
    for k in range(1, T):
        a = np.abs(sp_.H @ S[k, :k]).mean(axis=(0, 2))
        w = np.minimum(np.maximum(lam[k], 0.0) / np.maximum(a, 1e-9), cap)
        W[k] += (sp_.H.T * w) @ sp_.H
    if sp_.Hf is not None and lam_f is not None and lam_f.size:
        a = np.abs(sp_.Hf @ Phi.Phi_x[T]).mean(axis=(0, 2))
        w = np.minimum(np.maximum(lam_f, 0.0) / np.maximum(a, 1e-9), cap)
        WT = WT + (sp_.Hf.T * w) @ sp_.Hf
    return W, WT


def solve_alternating(sp_: ConvexSubproblem, settings: AlternationSettings | None = None,
                      warm: Plan | None = None) -> SubproblemSolution:
    """Alternate per-column Riccati updates of the responses with the nominal QP.

    Each pass factors one Riccati recursion with the current column weights,
    sweeps every response column, makes the responses and overbounds
    consistent and solves the nominal-plus-correction QP with the resulting
    tightening constants.  The multipliers of that QP reweight the columns
    for the next pass.  Every returned iterate is feasible for the
    subproblem; optimality is not guaranteed (use :func:`solve_generic` or
    :func:`solve_structured` for the exact optimum).
    """
    st = settings or AlternationSettings()
    T, n, m = sp_.T, sp_.n, sp_.m
    mu = sp_.mu if sp_.tau_on else np.zeros(n)
    zeros_L = np.zeros((T, T, n, n))
    zeros_Lu = np.zeros((T, T, m, n))
    zeros_LT = np.zeros((T, n, n))
    timings = {"jac": sp_.jac_time, "ricc": 0.0, "qp": 0.0}
    if warm is not None:
        psi = np.concatenate([warm.psi_x[:T], warm.psi_u], axis=1) if sp_.psi_free \
            else np.zeros((T, n + m))
        Phi_u0 = warm.Phi.Phi_u
    else:
        psi = np.zeros((T, n + m))
        Phi_u0 = None
    if sp_.psi_free and warm is None:
        # seed the correction with the one the QP wants when it is not boxed
        t0 = time.perf_counter()
        nom = solve_nominal(sp_)
        timings["qp"] += time.perf_counter() - t0
        if nom.status == "optimal":
            psi = np.concatenate([nom.psi_x[:T], nom.psi_u], axis=1)
    lam = lam_f = None
    Phi = None
    best = None
    shrink = 0
    J_prev = np.inf
    status = "max_iter"
    p = 0
    for p in range(1, st.passes + st.shrink_tries + 1):
        if p - shrink > st.passes:
            break
        t0 = time.perf_counter()
        if Phi is None and Phi_u0 is not None:
            Phi, tau, g = consistent_responses(sp_.A, sp_.B, sp_.e, mu, Phi_u0, np.zeros(T), psi)
        else:
            W, WT = _column_weights(sp_, Phi, lam, lam_f, st)
            P, K, Gi = _kernels.lq_factor(sp_.A, sp_.B, *_stage_weights(W, T, n), WT, 1)
            tau = np.zeros(T) if Phi is None else tau
            for _ in range(st.fixed_point):
                sig = sp_.e + mu[None, :] * tau[:, None] ** 2
                Xo = np.zeros((T + 1, T, n, n))
                Uo = np.zeros((T, T, m, n))
                _kernels.column_sweep(sp_.A, sp_.B, P, K, Gi, zeros_L, zeros_Lu, zeros_LT,
                                      sig, np.zeros(n), np.zeros(T), 1.0, False, Xo, Uo,
                                      np.zeros(T))
                Phi, tau_new, g = consistent_responses(sp_.A, sp_.B, sp_.e, mu, Uo, np.zeros(T), psi)
                done = np.allclose(tau_new, tau, rtol=1e-10, atol=1e-14)
                tau = tau_new
                if done or not sp_.tau_on:
                    break
        t1 = time.perf_counter()
        nom = solve_nominal(sp_, Phi, tau)
        timings["ricc"] += t1 - t0
        timings["qp"] += time.perf_counter() - t1
        if nom.status != "optimal":
            if best is None and np.any(psi):
                # the seeded correction inflated the tube; retry with a smaller one
                shrink += 1
                psi = 0.5 * psi if shrink < st.shrink_tries else np.zeros_like(psi)
                Phi_u0 = None
                Phi = None
                continue
            if best is None:
                return _failed(sp_, "infeasible" if nom.status == "infeasible" else nom.status,
                               p, timings)
            break
        J = objective(sp_, nom.z, nom.v, nom.psi_x, nom.psi_u, Phi)
        if best is None or J < best[0]:
            best = (J, nom, Phi, tau, g)
        lam, lam_f = nom.lam, nom.lam_f
        if sp_.psi_free:
            psi = np.concatenate([nom.psi_x[:T], nom.psi_u], axis=1)
        if abs(J_prev - J) <= st.obj_tol * max(1.0, abs(J)):
            status = "optimal"
            break
        J_prev = J
    if st.passes == 1:
        status = "optimal"
    J, nom, Phi, tau, g = best
    return SubproblemSolution(nom.z, nom.v, nom.psi_x, nom.psi_u, Phi, tau, g, J, status, p,
                              timings, {"passes": p})
