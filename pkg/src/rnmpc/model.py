"""Uncertain discrete-time dynamics, exact Jacobians and the model-error bound.

A :class:`Model` wraps a state-transition map ``f(x, u)`` and a disturbance
matrix ``E(x, u)``; the true system is ``x+ = f(x, u) + E(x, u) w`` with
``||w||_inf <= 1``.  Model maps must be vectorised over a trailing batch axis
and accept complex arguments: Jacobians are taken by complex-step
differentiation, which is exact to rounding error.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np

_CSTEP = 1e-30


class DimensionError(ValueError):
    """Raised when array shapes do not match the model dimensions."""


@dataclass(frozen=True, eq=False)
class Model:
    """Discrete-time uncertain system ``x+ = f(x,u) + E(x,u) w``.

    Parameters
    ----------
    name : str
        Registry identifier.
    n_x, n_u : int
        State and input dimensions.
    f : callable
        ``f(x, u)`` with ``x`` of shape ``(n_x, ...)`` and ``u`` of shape
        ``(n_u, ...)``.  Must be complex-safe.
    E : callable
        ``E(x, u)`` returning an ``(n_x, n_x)`` matrix for unbatched inputs.
    constant_E : bool
        True when ``E`` does not depend on ``(x, u)``.  Only then is the
        curvature bound of :func:`sigma` a certified overbound.
    """

    name: str
    n_x: int
    n_u: int
    f: Callable[[np.ndarray, np.ndarray], np.ndarray]
    E: Callable[[np.ndarray, np.ndarray], np.ndarray]
    dt: float | None = None
    constant_E: bool = True
    params: Mapping[str, Any] = field(default_factory=dict)
    state_names: tuple[str, ...] = ()
    input_names: tuple[str, ...] = ()
    velocity_idx: tuple[int, ...] = ()

    def fingerprint(self) -> str:
        blob = json.dumps({"name": self.name, "n_x": self.n_x, "n_u": self.n_u,
                           "dt": self.dt, "params": _jsonable(dict(self.params))},
                          sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Linearization:
    A: np.ndarray
    B: np.ndarray


@dataclass(frozen=True, eq=False)
class ErrorBoundParams:
    """Curvature bounds ``mu`` and the map ``(z, v) -> ||e_i^T E(z,v)||_1``."""

    mu: np.ndarray
    e_rows: Callable[[np.ndarray, np.ndarray], np.ndarray]
    verified: bool = True

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        if np.any(mu < 0):
            raise ValueError("curvature bounds must be nonnegative")
        object.__setattr__(self, "mu", mu)

    def simplified(self) -> "ErrorBoundParams":
        """Same bound with the curvature term dropped (``mu = 0``)."""
        return ErrorBoundParams(np.zeros_like(self.mu), self.e_rows, verified=False)

    def fingerprint(self) -> str:
        return hashlib.sha256(np.round(self.mu, 14).tobytes()).hexdigest()[:16]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in np.asarray(obj, dtype=object).tolist()] \
            if not isinstance(obj, np.ndarray) else np.asarray(obj).tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _check_vec(a, n, what):
    a = np.asarray(a)
    if a.shape[:1] != (n,):
        raise DimensionError(f"{what} must have leading dimension {n}, got shape {a.shape}")
    return a


def step(m: Model, x, u, w) -> np.ndarray:
    """One step of the true system ``f(x,u) + E(x,u) w``."""
    x = _check_vec(x, m.n_x, "state")
    u = _check_vec(u, m.n_u, "input")
    w = _check_vec(w, m.n_x, "disturbance")
    return np.asarray(m.f(x, u)) + np.asarray(m.E(x, u)) @ w


def jacobians(m: Model, z, v) -> Linearization:
    """Exact Jacobians ``A = df/dx``, ``B = df/du`` at ``(z, v)``."""
    z = _check_vec(z, m.n_x, "state").astype(float)
    v = _check_vec(v, m.n_u, "input").astype(float)
    A, B = jacobians_along(m, z[None], v[None])
    return Linearization(A[0], B[0])


def jacobians_along(m: Model, z: np.ndarray, v: np.ndarray):
    """Jacobians at every point of a trajectory.

    ``z`` has shape ``(N, n_x)`` and ``v`` shape ``(N, n_u)``; returns
    ``A`` of shape ``(N, n_x, n_x)`` and ``B`` of shape ``(N, n_x, n_u)``.
    All points are evaluated in one batched complex-step call.
    """
    z = np.asarray(z, dtype=float)
    v = np.asarray(v, dtype=float)
    N, n, nu = z.shape[0], m.n_x, m.n_u
    if z.shape != (N, n) or v.shape != (N, nu):
        raise DimensionError(f"trajectory shapes {z.shape}, {v.shape} do not match model")
    ny = n + nu
    Y = np.concatenate([z, v], axis=1)                     # (N, ny)
    Yc = np.repeat(Y[:, None, :], ny, axis=1).astype(complex)
    Yc[:, np.arange(ny), np.arange(ny)] += 1j * _CSTEP
    Yc = Yc.reshape(N * ny, ny).T                          # (ny, N*ny)
    F = np.asarray(m.f(Yc[:n], Yc[n:]))                    # (n, N*ny)
    J = (F.imag / _CSTEP).reshape(n, N, ny).transpose(1, 0, 2)
    return J[:, :, :n].copy(), J[:, :, n:].copy()


def simulate_nominal(m: Model, z0, v) -> np.ndarray:
    """Roll the disturbance-free dynamics forward from ``z0`` under ``v``."""
    v = np.asarray(v, dtype=float)
    z = np.empty((v.shape[0] + 1, m.n_x))
    z[0] = z0
    for k in range(v.shape[0]):
        z[k + 1] = np.real(m.f(z[k], v[k]))
    return z


def e_row_norms(m: Model) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """Map ``(z, v) -> ||e_i^T E(z, v)||_1`` for every row ``i``."""
    if m.constant_E:
        const = np.abs(np.asarray(m.E(np.zeros(m.n_x), np.zeros(m.n_u)), dtype=float)).sum(axis=1)
        return lambda z, v: const.copy()
    return lambda z, v: np.abs(np.asarray(m.E(z, v), dtype=float)).sum(axis=1)


def error_bound(m: Model, mu) -> ErrorBoundParams:
    mu = np.broadcast_to(np.asarray(mu, dtype=float), (m.n_x,)).copy()
    return ErrorBoundParams(mu, e_row_norms(m), verified=m.constant_E)


def sigma(p: ErrorBoundParams, m: Model, z, v, tau: float) -> np.ndarray:
    """Componentwise model-error bound ``tau^2 mu_i + ||e_i^T E(z,v)||_1``."""
    if tau < 0:
        raise ValueError(f"tau must be nonnegative, got {tau}")
    return tau ** 2 * p.mu + p.e_rows(np.asarray(z), np.asarray(v))


# ---------------------------------------------------------------------------
# curvature estimation


def _hessians(m: Model, Y: np.ndarray, W: np.ndarray | None, h: float) -> np.ndarray:
    """Hessians of ``(f + E w)_i`` w.r.t. ``y = (x, u)`` at the rows of ``Y``.

    Central differences of complex-step gradients; returns ``(N, n_x, ny, ny)``.
    ``W`` holds one disturbance per row of ``Y`` and only matters for a
    state-dependent ``E`` (which must then accept batched arguments and
    return ``(n_x, n_x, M)``).
    """
    n = m.n_x
    N, ny = Y.shape
    shifts = np.concatenate([np.eye(ny), -np.eye(ny)]) * h      # (2ny, ny)
    Yp = (Y[:, None, :] + shifts[None]).reshape(N * 2 * ny, ny)
    M = Yp.shape[0]
    Yc = np.repeat(Yp[:, None, :], ny, axis=1).astype(complex)
    Yc[:, np.arange(ny), np.arange(ny)] += 1j * _CSTEP
    Yc = Yc.reshape(M * ny, ny).T
    F = np.asarray(m.f(Yc[:n], Yc[n:]))
    if W is not None and not m.constant_E:
        Wr = np.repeat(W, 2 * ny * ny, axis=0).T                 # (n, M*ny)
        F = F + np.einsum("ijm,jm->im", np.asarray(m.E(Yc[:n], Yc[n:])), Wr)
    G = (F.imag / _CSTEP).reshape(n, M, ny).transpose(1, 0, 2)
    G = G.reshape(N, 2, ny, n, ny)                              # [N, sign, dir, out, grad]
    H = ((G[:, 0] - G[:, 1]) / (2 * h)).transpose(0, 2, 1, 3)
    return 0.5 * (H + H.transpose(0, 1, 3, 2))


def _max_quadratic_on_box(H: np.ndarray, exhaustive_limit: int = 12) -> np.ndarray:
    """Upper bound on ``max_{||h||_inf<=1} |h^T H h|`` for stacked symmetric ``H``.

    ``H`` is split into its positive and negative semidefinite parts; each
    part's quadratic form is convex, so its box maximum sits at a sign vector
    and is enumerated exactly for ``ny <= exhaustive_limit``.  Above that the
    bound ``sum_ij |H_ij|`` of each part is used.  The result is exact whenever
    ``H`` is semidefinite and never below the true value.
    """
    ny = H.shape[-1]
    lam, V = np.linalg.eigh(H)
    Hp = np.einsum("...ik,...k,...jk->...ij", V, np.clip(lam, 0, None), V)
    Hm = np.einsum("...ik,...k,...jk->...ij", V, np.clip(-lam, 0, None), V)
    if ny <= exhaustive_limit:
        signs = np.array(list(itertools.product([-1.0, 1.0], repeat=ny - 1)))
        signs = np.concatenate([np.ones((signs.shape[0], 1)), signs], axis=1)
        vp = np.einsum("vi,...ij,vj->...v", signs, Hp, signs).max(axis=-1)
        vm = np.einsum("vi,...ij,vj->...v", signs, Hm, signs).max(axis=-1)
        return np.maximum(vp, vm)
    return np.maximum(np.abs(Hp).sum(axis=(-2, -1)), np.abs(Hm).sum(axis=(-2, -1)))


@dataclass
class CurvatureEstimate:
    params: ErrorBoundParams
    history: np.ndarray          # running max of mu after each sample batch
    n_samples: int
    seed: int

    @property
    def mu(self) -> np.ndarray:
        return self.params.mu

    def converged(self, rel: float = 0.02) -> bool:
        """True if the last half of the samples raised no bound by more than ``rel``."""
        h = self.history
        if len(h) < 2:
            return False
        mid = h[len(h) // 2]
        return bool(np.all(h[-1] <= mid * (1 + rel) + 1e-15))


def estimate_curvature(m: Model, C, n_samples: int = 2000, seed: int = 0,
                       fd_step: float = 1e-4, batch: int = 256) -> CurvatureEstimate:
    """Sampled curvature bounds ``mu_i = 1/2 max |h^T H_i(xi) h|``.

    ``xi`` is drawn uniformly from the bounded polytope ``C`` (rejection
    sampling in its bounding box); the inner maximisation over the unit box is
    done over sign vectors.  Deterministic for a fixed ``seed``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    from .polytope import bounding_box

    lo, hi = bounding_box(C)          # raises on unbounded sets
    rng = np.random.default_rng(seed)
    ny = m.n_x + m.n_u
    mu = np.zeros(m.n_x)
    history = []
    drawn = 0
    while drawn < n_samples:
        want = min(batch, n_samples - drawn)
        cand = rng.uniform(lo, hi, size=(4 * want + 16, ny))
        inside = C.contains_many(cand)
        pts = cand[inside][:want]
        if pts.shape[0] == 0:
            continue
        W = None if m.constant_E else rng.choice([-1.0, 1.0], size=(pts.shape[0], m.n_x))
        H = _hessians(m, pts, W, fd_step)
        vals = 0.5 * _max_quadratic_on_box(H)                      # (N, n_x)
        mu = np.maximum(mu, vals.max(axis=0))
        drawn += pts.shape[0]
        history.append(mu.copy())
    # finite differences leave ~1e-9 noise on exactly-linear components
    mu = np.where(mu < 1e-9, 0.0, mu)
    params = ErrorBoundParams(mu, e_row_norms(m), verified=m.constant_E)
    return CurvatureEstimate(params, np.array(history), drawn, seed)
