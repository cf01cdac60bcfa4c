"""Polytopes in halfspace form, support functions and terminal-set synthesis.

Sets are stored as ``{y : H y + b <= 0}`` with ``b < 0`` so the origin is an
interior point.  Linear programs are solved with HiGHS through
:func:`scipy.optimize.linprog`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.optimize import linprog

from .model import DimensionError, ErrorBoundParams, Model, jacobians, sigma

_LP_OPTS = {"presolve": True}


class UnboundedSetError(ValueError):
    """Raised when a polytope expected to be bounded is not."""


class EmptySetError(ValueError):
    """Raised when a polytope is empty."""


class TerminalSynthesisError(RuntimeError):
    """Raised when no robust invariant terminal set can be found."""


def _lp_max(H: np.ndarray, b: np.ndarray, d: np.ndarray):
    res = linprog(-d, A_ub=H, b_ub=-b, bounds=(None, None), method="highs", options=_LP_OPTS)
    if res.status == 2:
        # HiGHS may report "unbounded or infeasible" as infeasible; with the
        # origin feasible only the former is possible
        if np.all(b <= 0):
            return np.inf, None
        raise EmptySetError("polytope is empty")
    if res.status == 3:
        return np.inf, None
    if res.status != 0:
        raise RuntimeError(f"LP failed: {res.message}")
    return -res.fun, res.x


@dataclass(frozen=True, eq=False)
class ConstraintSet:
    """Polytope ``{(x, u) : H (x, u) + b <= 0}``.

    Parameters
    ----------
    H : (n_c, n_x + n_u) array
    b : (n_c,) array, all entries strictly negative.
    n_x : int
        Number of leading coordinates that are states; the rest are inputs.
        Terminal sets use ``n_u = 0``.
    """

    H: np.ndarray
    b: np.ndarray
    n_x: int
    check_bounded: bool = field(default=True, repr=False)

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        b = np.asarray(self.b, dtype=float).reshape(-1)
        if H.shape[0] != b.shape[0]:
            raise DimensionError(f"H has {H.shape[0]} rows but b has {b.shape[0]}")
        if not 0 <= self.n_x <= H.shape[1]:
            raise DimensionError("n_x exceeds the set dimension")
        if np.any(b >= 0):
            raise ValueError("origin must be strictly feasible (all offsets b_i < 0)")
        H.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "b", b)
        if self.check_bounded:
            bounding_box(self)

    @property
    def dim(self) -> int:
        return self.H.shape[1]

    @property
    def n_u(self) -> int:
        return self.dim - self.n_x

    @property
    def n_c(self) -> int:
        return self.H.shape[0]

    @classmethod
    def from_box(cls, x_max, u_max=(), x_min=None, u_min=None) -> "ConstraintSet":
        """Box ``x_min <= x <= x_max``, ``u_min <= u <= u_max`` (symmetric by default).

        Infinite bounds are skipped.
        """
        x_max = np.asarray(x_max, dtype=float).reshape(-1)
        u_max = np.asarray(u_max, dtype=float).reshape(-1)
        x_min = -x_max if x_min is None else np.asarray(x_min, dtype=float).reshape(-1)
        u_min = -u_max if u_min is None else np.asarray(u_min, dtype=float).reshape(-1)
        hi = np.concatenate([x_max, u_max])
        lo = np.concatenate([x_min, u_min])
        ny = hi.size
        rows, offs = [], []
        for i in range(ny):
            if np.isfinite(hi[i]):
                rows.append(np.eye(ny)[i])
                offs.append(-hi[i])
            if np.isfinite(lo[i]):
                rows.append(-np.eye(ny)[i])
                offs.append(lo[i])
        return cls(np.array(rows), np.array(offs), x_max.size)

    def values(self, y) -> np.ndarray:
        """Constraint values ``H y + b`` (nonpositive inside)."""
        return self.H @ np.asarray(y, dtype=float) + self.b

    def contains(self, y, tol: float = 0.0) -> bool:
        return bool(np.all(self.values(y) <= tol))

    def contains_many(self, Y, tol: float = 0.0) -> np.ndarray:
        """Row-wise membership for ``Y`` of shape ``(N, dim)``."""
        Y = np.asarray(Y, dtype=float)
        return np.all(Y @ self.H.T + self.b <= tol, axis=1)

    def normalized(self) -> "ConstraintSet":
        """Same set with rows scaled so that ``b_i = -1``."""
        s = -self.b
        return ConstraintSet(self.H / s[:, None], -np.ones_like(self.b), self.n_x,
                             check_bounded=False)

    def state_part(self, K: np.ndarray) -> "ConstraintSet":
        """``{x : (x, K x) in C}`` as a state-space polytope.

        Rows that vanish under ``K`` hold trivially (``b < 0``) and are dropped.
        """
        Hx = self.H[:, : self.n_x] + self.H[:, self.n_x:] @ K
        keep = np.abs(Hx).max(axis=1) > 0
        return ConstraintSet(Hx[keep], self.b[keep], self.n_x, check_bounded=False)

    def to_dict(self) -> dict:
        return {"H": self.H.tolist(), "b": self.b.tolist(), "n_x": self.n_x}

    @classmethod
    def from_dict(cls, d) -> "ConstraintSet":
        return cls(np.array(d["H"], dtype=float), np.array(d["b"], dtype=float), int(d["n_x"]))


def support(P: ConstraintSet, d) -> float:
    """Support function ``max_{y in P} d^T y`` by linear programming."""
    d = np.asarray(d, dtype=float).reshape(-1)
    if d.size != P.dim:
        raise DimensionError(f"direction has size {d.size}, set has dimension {P.dim}")
    val, _ = _lp_max(P.H, P.b, d)
    if not np.isfinite(val):
        raise UnboundedSetError("support is unbounded in the requested direction")
    return float(val)


def supports(P: ConstraintSet, D: np.ndarray) -> np.ndarray:
    """Support function in every row direction of ``D``."""
    return np.array([support(P, d) for d in np.atleast_2d(D)])


def bounding_box(P: ConstraintSet) -> tuple[np.ndarray, np.ndarray]:
    """Tight axis-aligned bounding box; raises if ``P`` is unbounded."""
    n = P.dim
    hi = np.empty(n)
    lo = np.empty(n)
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        h, _ = _lp_max(P.H, P.b, e)
        l, _ = _lp_max(P.H, P.b, -e)
        if not (np.isfinite(h) and np.isfinite(l)):
            raise UnboundedSetError(f"set is unbounded along coordinate {i}")
        hi[i], lo[i] = h, -l
    return lo, hi


def prune_redundant(H: np.ndarray, b: np.ndarray, tol: float = 1e-9):
    """Drop rows of ``H y + b <= 0`` implied by the others.

    Rows are first normalised to unit offset magnitude and exact duplicates
    removed; each remaining row is then tested by maximising it over the set
    described by the other rows.
    """
    s = np.abs(b)
    s = np.where(s > 0, s, 1.0)
    Hn = H / s[:, None]
    bn = b / s
    _, keep_idx = np.unique(np.round(np.c_[Hn, bn], 12), axis=0, return_index=True)
    keep = np.zeros(H.shape[0], bool)
    keep[np.sort(keep_idx)] = True
    for i in range(H.shape[0]):
        if not keep[i]:
            continue
        keep[i] = False
        others = np.flatnonzero(keep)
        if others.size == 0:
            keep[i] = True
            continue
        val, _ = _lp_max(Hn[others], bn[others], Hn[i])
        if not np.isfinite(val) or val + bn[i] > tol:
            keep[i] = True
    return H[keep], b[keep]


def hausdorff_supports(P1: ConstraintSet, P2: ConstraintSet, D: np.ndarray) -> float:
    """Largest support-function gap between two sets over directions ``D``."""
    return float(np.max(np.abs(supports(P1, D) - supports(P2, D))))


# ---------------------------------------------------------------------------
# costs and terminal ingredients


@dataclass(frozen=True, eq=False)
class CostSpec:
    """Quadratic stage cost ``x'Qx + u'Ru`` and terminal weight ``P``."""

    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray | None = None

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        for name, M in (("Q", Q), ("R", R)):
            if not np.allclose(M, M.T):
                raise ValueError(f"{name} must be symmetric")
            if np.linalg.eigvalsh(M).min() <= 0:
                raise ValueError(f"{name} must be positive definite")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        if self.P is not None:
            P = np.atleast_2d(np.asarray(self.P, dtype=float))
            if not np.allclose(P, P.T, atol=1e-9 * max(1.0, np.abs(P).max())):
                raise ValueError("P must be symmetric")
            if np.linalg.eigvalsh(0.5 * (P + P.T)).min() < -1e-9:
                raise ValueError("P must be positive semidefinite")
            object.__setattr__(self, "P", 0.5 * (P + P.T))

    def with_terminal(self, P) -> "CostSpec":
        return CostSpec(self.Q, self.R, P)


@dataclass(frozen=True, eq=False)
class TerminalIngredients:
    """Terminal set ``X_f``, gain ``K_f``, disturbance bound and cost.

    ``X_f = {x : H x + b <= 0}``; ``Sigma_f`` is stored as the diagonal vector.
    """

    X_f: ConstraintSet
    K_f: np.ndarray
    A_cl: np.ndarray
    Sigma_f: np.ndarray
    tau_f: float
    P: np.ndarray
    method: str = "max"
    model_hash: str = ""
    error_hash: str = ""

    @property
    def n_f(self) -> int:
        return self.X_f.n_c

    def to_json(self) -> str:
        doc = {
            "schema": "rnmpc.terminal/1",
            "n_x": int(self.A_cl.shape[0]),
            "n_u": int(self.K_f.shape[0]),
            "H_f": self.X_f.H.tolist(),
            "b_f": self.X_f.b.tolist(),
            "K_f": self.K_f.tolist(),
            "A_cl": self.A_cl.tolist(),
            "Sigma_f": self.Sigma_f.tolist(),
            "tau_f": float(self.tau_f),
            "P": self.P.tolist(),
            "method": self.method,
            "model_hash": self.model_hash,
            "error_hash": self.error_hash,
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "TerminalIngredients":
        d = json.loads(text)
        if d.get("schema") != "rnmpc.terminal/1":
            raise ValueError(f"unsupported terminal schema {d.get('schema')!r}")
        n_x = int(d["n_x"])
        X_f = ConstraintSet(np.array(d["H_f"], float).reshape(-1, n_x), np.array(d["b_f"], float),
                            n_x, check_bounded=False)
        return cls(X_f, np.array(d["K_f"], float).reshape(-1, n_x), np.array(d["A_cl"], float),
                   np.array(d["Sigma_f"], float), float(d["tau_f"]), np.array(d["P"], float),
                   d.get("method", "max"), d.get("model_hash", ""), d.get("error_hash", ""))


def lqr_gain(A, B, Q, R) -> np.ndarray:
    """Discrete LQR gain ``K`` for ``u = K x`` (so ``A + B K`` is stable)."""
    Pare = linalg.solve_discrete_are(A, B, Q, R)
    return -np.linalg.solve(R + B.T @ Pare @ B, B.T @ Pare @ A)


def lyapunov_cost(A_cl, Q, R, K) -> np.ndarray:
    """``P`` with ``A_cl' P A_cl - P + Q + K' R K = 0``."""
    P = linalg.solve_discrete_lyapunov(A_cl.T, Q + K.T @ R @ K)
    return 0.5 * (P + P.T)


def max_rpi(A: np.ndarray, sig: np.ndarray, X: ConstraintSet, max_iter: int = 200,
            tol: float = 1e-9) -> ConstraintSet:
    """Maximal robust invariant subset of ``X`` for ``x+ = A x + diag(sig) w``.

    Adds the constraints ``h' A^t x + sum_{s<t} ||h' A^s diag(sig)||_1 + b <= 0``
    for ``t = 1, 2, ...`` and stops once a whole new layer is redundant.
    """
    H0 = X.H
    b0 = X.b.copy()
    H, b = prune_redundant(H0, b0, tol)
    Ht = H0.copy()
    acc = np.zeros_like(b0)
    for _ in range(max_iter):
        acc = acc + np.abs(Ht * sig[None, :]).sum(axis=1)
        Ht = Ht @ A
        bt = b0 + acc
        if np.any(bt >= 0):
            raise TerminalSynthesisError("no RPI terminal set; disturbance too large")
        redundant = True
        for h_row, b_row in zip(Ht, bt):
            val, _ = _lp_max(H, b, h_row)
            if val + b_row > tol:
                redundant = False
                break
        if redundant:
            return ConstraintSet(H, b, X.n_x, check_bounded=False)
        H, b = prune_redundant(np.vstack([H, Ht]), np.concatenate([b, bt]), tol)
    raise TerminalSynthesisError("no RPI terminal set; disturbance too large "
                                 f"(recursion did not converge in {max_iter} iterations)")


def min_rpi_outer(A: np.ndarray, sig: np.ndarray, D: np.ndarray, rel_tol: float = 1e-15,
                  max_terms: int = 10_000) -> np.ndarray:
    """Support of the minimal invariant set ``sum_s A^s diag(sig) B`` along rows of ``D``.

    The series is truncated once its terms fall below ``rel_tol`` relative to
    the partial sum; a geometric bound on the remaining tail is added so the
    result never underestimates.
    """
    rho = max(abs(np.linalg.eigvals(A))) if A.size else 0.0
    if rho >= 1:
        raise TerminalSynthesisError("closed loop is not stable")
    h = np.zeros(D.shape[0])
    M = D.copy()
    for _ in range(max_terms):
        term = np.abs(M * sig[None, :]).sum(axis=1)
        h += term
        M = M @ A
        if np.all(term <= rel_tol * np.maximum(h, 1e-300)):
            break
    # tail: ||v A^q S||_1 <= ||v||_1 ||A^q||_inf max(sig) with v = d' A^S, and
    # sum_q ||A^q||_inf <= sum_{r<k} ||A^r||_inf / (1 - ||A^k||_inf)
    powers = [np.eye(A.shape[0])]
    while np.linalg.norm(powers[-1] @ A, np.inf) >= 1 or len(powers) == 1:
        powers.append(powers[-1] @ A)
        if len(powers) > 1000:
            raise TerminalSynthesisError("closed loop decays too slowly for a tail bound")
    delta = np.linalg.norm(powers[-1] @ A, np.inf)
    geo = sum(np.linalg.norm(Pk, np.inf) for Pk in powers) / (1 - delta)
    return h + np.abs(M).sum(axis=1) * sig.max() * geo


def tau_of_set(X_f: ConstraintSet, K: np.ndarray) -> float:
    """``max_{x in X_f} ||(x, K x)||_inf``."""
    n = X_f.n_x
    D = np.vstack([np.eye(n), K])
    vals = [max(support(X_f, d), support(X_f, -d)) for d in D]
    return float(max(vals))


def _rpi_for(method, A_cl, sig, Xc, D_tmpl):
    if method == "max":
        return max_rpi(A_cl, sig, Xc)
    h = min_rpi_outer(A_cl, sig, D_tmpl)
    if np.any(h <= 0):
        raise TerminalSynthesisError("degenerate minimal invariant set (zero disturbance)")
    outer = ConstraintSet(np.vstack([D_tmpl, Xc.H]), np.concatenate([-h, Xc.b]), Xc.n_x,
                          check_bounded=False)
    return max_rpi(A_cl, sig, outer)


def _box_size(X: ConstraintSet) -> float:
    lo, hi = bounding_box(X)
    return float(np.sum(np.log(np.maximum(hi - lo, 1e-300))))


def synth_terminal(m: Model, cost: CostSpec, err: ErrorBoundParams, C: ConstraintSet,
                   method: str = "max", K_f: np.ndarray | None = None,
                   n_grid: int = 16, n_refine: int = 20) -> TerminalIngredients:
    """Terminal gain, cost and robust invariant set.

    ``K_f`` defaults to the LQR gain of the linearisation at the origin; ``P``
    solves the closed-loop Lyapunov equation.  ``method="max"`` returns the
    maximal RPI set inside ``{x : (x, K_f x) in C}``; ``method="min"`` returns
    the maximal RPI set inside a template outer bound of the minimal one.

    With nonzero curvature the disturbance bound ``Sigma_f = diag(sigma(0, 0,
    tau_f))`` depends on ``tau_f``, which bounds ``||(x, K_f x)||_inf`` over
    ``X_f``.  For a trial value ``t`` the set is computed inside
    ``{x : ||(x, K_f x)||_inf <= t}`` with the bound ``sigma(0, 0, t)``, so the
    pair is consistent by construction; ``t`` is chosen to maximise the
    bounding-box volume of ``X_f`` (log grid, then golden-section refinement).
    """
    if method not in ("max", "min"):
        raise ValueError("method must be 'max' or 'min'")
    n = m.n_x
    lin = jacobians(m, np.zeros(n), np.zeros(m.n_u))
    A_f, B_f = lin.A, lin.B
    K = lqr_gain(A_f, B_f, cost.Q, cost.R) if K_f is None else np.atleast_2d(np.asarray(K_f, float))
    A_cl = A_f + B_f @ K
    if max(abs(np.linalg.eigvals(A_cl))) >= 1:
        raise TerminalSynthesisError("terminal gain does not stabilise the linearisation")
    P = lyapunov_cost(A_cl, cost.Q, cost.R, K)
    Xc = C.state_part(K)
    D_tmpl = np.vstack([np.eye(n), -np.eye(n), Xc.H])
    z0, v0 = np.zeros(n), np.zeros(m.n_u)
    IK = np.vstack([np.eye(n), K])

    def sig_at(t):
        return sigma(err, m, z0, v0, t)

    if np.all(err.mu == 0):
        X_best = _rpi_for(method, A_cl, sig_at(0.0), Xc, D_tmpl)
        t_best = tau_of_set(X_best, K)
    else:
        cache = {}

        def evaluate(logt):
            if logt not in cache:
                t = float(np.exp(logt))
                Xt = ConstraintSet(np.vstack([Xc.H, IK, -IK]),
                                   np.concatenate([Xc.b, np.full(2 * IK.shape[0], -t)]), n,
                                   check_bounded=False)
                try:
                    X = _rpi_for(method, A_cl, sig_at(t), Xt, D_tmpl)
                    cache[logt] = (_box_size(X), X, t)
                except (TerminalSynthesisError, EmptySetError):
                    cache[logt] = (-np.inf, None, t)
            return cache[logt]

        t0 = tau_of_set(Xc, K)
        grid = np.log(t0) + np.linspace(np.log(1e-4), 0.0, n_grid)
        vals = [evaluate(g)[0] for g in grid]
        i = int(np.argmax(vals))
        if not np.isfinite(vals[i]):
            raise TerminalSynthesisError("no RPI terminal set; disturbance too large")
        a, b = grid[max(i - 1, 0)], grid[min(i + 1, n_grid - 1)]
        gr = (np.sqrt(5) - 1) / 2
        c, d = b - gr * (b - a), a + gr * (b - a)
        for _ in range(n_refine):
            if evaluate(c)[0] >= evaluate(d)[0]:
                b, d = d, c
                c = b - gr * (b - a)
            else:
                a, c = c, d
                d = a + gr * (b - a)
        _, X_best, t_best = max(cache.values(), key=lambda e: e[0])
    ti = TerminalIngredients(X_f=X_best, K_f=K, A_cl=A_cl, Sigma_f=sig_at(t_best),
                             tau_f=float(t_best), P=P, method=method,
                             model_hash=m.fingerprint(), error_hash=err.fingerprint())
    rep = verify_rpi(ti, err, C=C, cost=cost, model=m)
    if not rep.passed:
        raise TerminalSynthesisError(f"synthesised terminal set failed verification: {rep.failures}")
    return ti


@dataclass
class RpiReport:
    """Margins of the terminal-set checks (nonnegative means satisfied)."""

    rpi_margins: np.ndarray
    admissible_margins: np.ndarray | None = None
    lyapunov_min_eig: float | None = None
    sigma_margin: float | None = None
    tau_margin: float | None = None
    tol: float = 1e-9
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        out = {"passed": self.passed, "failures": list(self.failures),
               "rpi_margins": self.rpi_margins.tolist(),
               "min_rpi_margin": float(self.rpi_margins.min())}
        for k in ("lyapunov_min_eig", "sigma_margin", "tau_margin"):
            out[k] = getattr(self, k)
        if self.admissible_margins is not None:
            out["min_admissible_margin"] = float(self.admissible_margins.min())
        return out


def verify_rpi(ti: TerminalIngredients, err: ErrorBoundParams | None = None, C=None,
               cost: CostSpec | None = None, model: Model | None = None,
               tol: float = 1e-9) -> RpiReport:
    """Re-check the terminal ingredients by support-function LPs.

    Always checks ``A_cl X_f + Sigma_f B ⊆ X_f`` row by row.  Optional
    arguments add: constraint admissibility of ``(x, K_f x)`` on ``X_f``
    (``C``), the Lyapunov inequality (``cost``), and consistency of
    ``Sigma_f`` and ``tau_f`` with the error bound (``err`` and ``model``).
    """
    X = ti.X_f
    failures = []
    margins = np.empty(X.n_c)
    for i, (h, b) in enumerate(zip(X.H, X.b)):
        margins[i] = -b - (support(X, ti.A_cl.T @ h) + np.abs(h * ti.Sigma_f).sum())
    if margins.min() < -tol:
        failures.append("rpi")
    rep = RpiReport(margins, tol=tol, failures=failures)
    if C is not None:
        Xc = C.state_part(ti.K_f)
        adm = np.array([-b - support(X, h) for h, b in zip(Xc.H, Xc.b)])
        rep.admissible_margins = adm
        if adm.min() < -tol:
            failures.append("admissible")
    if cost is not None:
        L = ti.A_cl.T @ ti.P @ ti.A_cl - ti.P + cost.Q + ti.K_f.T @ cost.R @ ti.K_f
        rep.lyapunov_min_eig = float(np.linalg.eigvalsh(-0.5 * (L + L.T)).min())
        if rep.lyapunov_min_eig < -tol:
            failures.append("lyapunov")
    if err is not None and model is not None:
        need = sigma(err, model, np.zeros(model.n_x), np.zeros(model.n_u), ti.tau_f)
        rep.sigma_margin = float(np.min(ti.Sigma_f - need))
        rep.tau_margin = float(ti.tau_f - tau_of_set(X, ti.K_f))
        if rep.sigma_margin < -tol:
            failures.append("sigma")
        if rep.tau_margin < -tol:
            failures.append("tau")
    return rep
