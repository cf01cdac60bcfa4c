"""Random problem instances shared by the test modules."""

from __future__ import annotations

import numpy as np

from rnmpc.model import Model
from rnmpc.subproblem import ConvexSubproblem


def random_subproblem(seed: int, T: int = 6, n: int = 3, m: int = 2, terminal: bool = True,
                      mu_on: bool = True, box: float | None = None) -> ConvexSubproblem:
    """Random LTV subproblem with box constraints (optionally tight, so rows are active)."""
    rng = np.random.default_rng(seed)
    A = np.eye(n) + 0.1 * rng.standard_normal((T, n, n))
    B = 0.3 * rng.standard_normal((T, n, m))
    c = 0.01 * rng.standard_normal((T, n))
    x0 = 0.3 * rng.uniform(-1, 1, n)
    ny = n + m
    lim = np.ones(ny) if box is None else rng.uniform(box, 1.0, ny)
    H = np.vstack([np.eye(ny) / lim[:, None], -np.eye(ny) / lim[:, None]])
    b = -np.ones(2 * ny)
    Hf = np.vstack([np.eye(n), -np.eye(n)]) / 0.5 if terminal else None
    bf = -np.ones(2 * n) if terminal else None
    e = np.full((T, n), 0.01)
    mu = rng.uniform(0, 0.3, n) if mu_on else np.zeros(n)
    return ConvexSubproblem(A=A, B=B, c=c, x0=x0, z_ref=np.zeros((T + 1, n)),
                            v_ref=np.zeros((T, m)), H=H, b=b, Hf=Hf, bf=bf, e=e, mu=mu,
                            Q=np.eye(n), R=0.1 * np.eye(m), P=np.eye(n), terminal_eq=terminal)


def linear_model(A, B, E, name: str = "linear") -> Model:
    """``x+ = A x + B u + E w`` as a :class:`Model`."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    E = np.atleast_2d(np.asarray(E, dtype=float))

    def f(x, u):
        return np.tensordot(A, x, axes=1) + np.tensordot(B, u, axes=1)

    return Model(name, A.shape[0], B.shape[1], f, lambda x, u: E, dt=0.1)
