"""Bundled benchmark systems and their stored data.

Continuous-time models are discretised with one explicit RK4 step per sample.
All maps are vectorised over trailing batch axes and complex-safe.  Numerical
parameters, disturbance scalings, default constraint boxes, cost weights and
stored curvature bounds live in ``data/models.toml``.
"""

from __future__ import annotations

from functools import lru_cache
from importlib import resources
from typing import Callable

import numpy as np
import tomli

from .model import DimensionError, ErrorBoundParams, Model, error_bound
from .polytope import ConstraintSet, CostSpec

REGISTRY = ("double_integrator", "scalar_quadratic", "cartpole", "quadcopter", "rocket17")


def rk4(fc: Callable, x, u, dt: float):
    """One classical Runge-Kutta step of ``xdot = fc(x, u)``."""
    k1 = fc(x, u)
    k2 = fc(x + 0.5 * dt * k1, u)
    k3 = fc(x + 0.5 * dt * k2, u)
    k4 = fc(x + dt * k3, u)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def _const_E(diag):
    E = np.diag(np.asarray(diag, dtype=float))
    E.setflags(write=False)
    return lambda x, u: E


def _stack(*rows):
    if len({np.shape(r) for r in rows}) == 1:
        return np.array(rows)
    return np.stack(np.broadcast_arrays(*rows))


# ---------------------------------------------------------------------------
# individual systems


def double_integrator(dt=0.1, e_diag=(0.01, 0.01)) -> Model:
    A = np.array([[1.0, dt], [0.0, 1.0]])
    B = np.array([[0.0], [dt]])

    def f(x, u):
        return np.tensordot(A, x, axes=1) + np.tensordot(B, u, axes=1)

    return Model("double_integrator", 2, 1, f, _const_E(e_diag), dt=dt,
                 params={"dt": dt, "e_diag": list(e_diag)}, state_names=("p", "v"),
                 input_names=("a",), velocity_idx=(1,))


def scalar_quadratic(dt=0.1, e_diag=(0.01,)) -> Model:
    """``x+ = x + dt (x^2 + u)``; its curvature bound is exactly ``dt``."""

    def f(x, u):
        return x + dt * (x * x + u)

    return Model("scalar_quadratic", 1, 1, f, _const_E(e_diag), dt=dt,
                 params={"dt": dt, "e_diag": list(e_diag)}, state_names=("x",),
                 input_names=("u",))


def cartpole(dt=0.1, M=1.0, m=0.2, l=0.5, g=9.81, u_scale=1.0, e_diag=(1e-3,) * 4) -> Model:
    """Cart with a point-mass pendulum; ``theta = 0`` is upright.

    State ``(p, p_dot, theta, theta_dot)``; the input is the horizontal force
    divided by ``u_scale``.
    """

    def fc(x, u):
        th, thd = x[2], x[3]
        s, c = np.sin(th), np.cos(th)
        pdd = (u_scale * u[0] + m * s * (l * thd * thd - g * c)) / (M + m * s * s)
        thdd = (g * s - pdd * c) / l
        return _stack(x[1], pdd, thd, thdd)

    return Model("cartpole", 4, 1, lambda x, u: rk4(fc, x, u, dt), _const_E(e_diag), dt=dt,
                 params={"dt": dt, "M": M, "m": m, "l": l, "g": g, "u_scale": u_scale,
                         "e_diag": list(e_diag)},
                 state_names=("p", "p_dot", "theta", "theta_dot"), input_names=("F",),
                 velocity_idx=(1, 3))


def quadcopter(dt=0.05, mass=0.5, g=9.81, J=(2.3e-3, 2.3e-3, 4.0e-3), e_diag=(1e-3,) * 12) -> Model:
    """Rigid-body quadcopter in hover-deviation coordinates.

    State ``(p, v, phi, theta, psi, omega)`` (ZYX Euler angles), input
    ``(thrust deviation, roll torque, pitch torque, yaw torque)``.
    """
    Jx, Jy, Jz = J

    def fc(x, u):
        vx, vy, vz = x[3], x[4], x[5]
        ph, th, ps = x[6], x[7], x[8]
        p, q, r = x[9], x[10], x[11]
        F = mass * g + u[0]
        sph, cph, sth, cth = np.sin(ph), np.cos(ph), np.sin(th), np.cos(th)
        sps, cps = np.sin(ps), np.cos(ps)
        ax = F / mass * (cph * sth * cps + sph * sps)
        ay = F / mass * (cph * sth * sps - sph * cps)
        az = F / mass * (cph * cth) - g
        tth = sth / cth
        phd = p + sph * tth * q + cph * tth * r
        thd = cph * q - sph * r
        psd = (sph * q + cph * r) / cth
        pd = (u[1] + (Jy - Jz) * q * r) / Jx
        qd = (u[2] + (Jz - Jx) * p * r) / Jy
        rd = (u[3] + (Jx - Jy) * p * q) / Jz
        return _stack(vx, vy, vz, ax, ay, az, phd, thd, psd, pd, qd, rd)

    return Model("quadcopter", 12, 4, lambda x, u: rk4(fc, x, u, dt), _const_E(e_diag), dt=dt,
                 params={"dt": dt, "mass": mass, "g": g, "J": list(J), "e_diag": list(e_diag)},
                 state_names=("px", "py", "pz", "vx", "vy", "vz", "phi", "theta", "psi",
                              "wx", "wy", "wz"),
                 input_names=("dT", "tx", "ty", "tz"), velocity_idx=(3, 4, 5, 9, 10, 11))


def rocket17(dt=0.05, mass=1.5, g=9.81, J=(0.04, 0.04, 0.01), arm=0.15,
             t_gimbal=0.08, t_thrust=0.1, t_roll=0.1, e_diag=(1e-3,) * 17) -> Model:
    """Thrust-vectored rocket with first-order actuator dynamics.

    State (17): position ``p``, velocity ``v``, attitude quaternion stored as
    ``(q_w - 1, q_x, q_y, q_z)``, body rates ``omega``, and four actuator
    states ``(delta_1, delta_2, dT, tau_roll)``: two gimbal angles, thrust
    deviation from hover and roll torque.  Input (4): commands for the four
    actuator states.  The engine sits ``arm`` below the centre of mass along
    the body z axis.
    """
    Jx, Jy, Jz = J
    tc = np.array([t_gimbal, t_gimbal, t_thrust, t_roll])

    def fc(x, u):
        v = x[3:6]
        qw, qx, qy, qz = 1.0 + x[6], x[7], x[8], x[9]
        wx, wy, wz = x[10], x[11], x[12]
        d1, d2, dT, tr = x[13], x[14], x[15], x[16]
        F = mass * g + dT
        c2 = np.cos(d2)
        Fb = (F * np.sin(d1) * c2, F * np.sin(d2), F * np.cos(d1) * c2)
        R = ((1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qw * qz), 2 * (qx * qz + qw * qy)),
             (2 * (qx * qy + qw * qz), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qw * qx)),
             (2 * (qx * qz - qw * qy), 2 * (qy * qz + qw * qx), 1 - 2 * (qx * qx + qy * qy)))
        acc = [sum(R[i][j] * Fb[j] for j in range(3)) / mass for i in range(3)]
        acc[2] = acc[2] - g
        qwd = -0.5 * (qx * wx + qy * wy + qz * wz)
        qxd = 0.5 * (qw * wx + qy * wz - qz * wy)
        qyd = 0.5 * (qw * wy + qz * wx - qx * wz)
        qzd = 0.5 * (qw * wz + qx * wy - qy * wx)
        tx, ty, tz = arm * Fb[1], -arm * Fb[0], tr
        wxd = (tx + (Jy - Jz) * wy * wz) / Jx
        wyd = (ty + (Jz - Jx) * wx * wz) / Jy
        wzd = (tz + (Jx - Jy) * wx * wy) / Jz
        ad = [(u[i] - x[13 + i]) / tc[i] for i in range(4)]
        return _stack(v[0], v[1], v[2], acc[0], acc[1], acc[2], qwd, qxd, qyd, qzd,
                      wxd, wyd, wzd, *ad)

    names = ("px", "py", "pz", "vx", "vy", "vz", "qw", "qx", "qy", "qz", "wx", "wy", "wz",
             "d1", "d2", "dT", "tr")
    return Model("rocket17", 17, 4, lambda x, u: rk4(fc, x, u, dt), _const_E(e_diag), dt=dt,
                 params={"dt": dt, "mass": mass, "g": g, "J": list(J), "arm": arm,
                         "t_gimbal": t_gimbal, "t_thrust": t_thrust, "t_roll": t_roll,
                         "e_diag": list(e_diag)},
                 state_names=names, input_names=("d1_cmd", "d2_cmd", "dT_cmd", "tr_cmd"),
                 velocity_idx=(3, 4, 5, 10, 11, 12))


_BUILDERS = {
    "double_integrator": double_integrator,
    "scalar_quadratic": scalar_quadratic,
    "cartpole": cartpole,
    "quadcopter": quadcopter,
    "rocket17": rocket17,
}


# ---------------------------------------------------------------------------
# stored data


@lru_cache(maxsize=None)
def _data() -> dict:
    text = resources.files("rnmpc").joinpath("data/models.toml").read_text()
    return tomli.loads(text)


def model_entry(name: str) -> dict:
    """Raw stored entry for a bundled model."""
    d = _data()
    if name not in d:
        raise KeyError(f"unknown model id {name!r}; known: {', '.join(REGISTRY)}")
    return d[name]


def _expand(v, n):
    v = np.asarray(v, dtype=float).reshape(-1)
    return np.full(n, v[0]) if v.size == 1 else v


def load_model(name: str, **overrides) -> Model:
    """Build a registered model with stored parameters (overridable)."""
    entry = model_entry(name)
    kw = dict(entry.get("params", {}))
    kw["dt"] = entry["dt"]
    kw["e_diag"] = tuple(entry["e_diag"])
    kw.update(overrides)
    for key, val in list(kw.items()):
        if isinstance(val, list):
            kw[key] = tuple(val)
    m = _BUILDERS[name](**kw)
    if len(kw["e_diag"]) != m.n_x:
        if len(kw["e_diag"]) != 1:
            raise DimensionError(f"e_diag of {name!r} has {len(kw['e_diag'])} entries, expected 1 or {m.n_x}")
        kw["e_diag"] = (float(kw["e_diag"][0]),) * m.n_x
        m = _BUILDERS[name](**kw)
    return m


def default_constraints(name: str) -> ConstraintSet:
    e = model_entry(name)
    c = e["constraints"]
    return ConstraintSet.from_box(c["x_max"], c["u_max"], c.get("x_min"), c.get("u_min"))


def default_cost(name: str) -> CostSpec:
    c = model_entry(name)["cost"]
    m = load_model(name)
    return CostSpec(np.diag(_expand(c["Q_diag"], m.n_x)), np.diag(_expand(c["R_diag"], m.n_u)))


def stored_error_bound(name: str, m: Model | None = None) -> ErrorBoundParams:
    """Error bound with the curvature vector stored for ``name``."""
    m = load_model(name) if m is None else m
    mu = _expand(model_entry(name).get("mu", [0.0]), m.n_x)
    return error_bound(m, mu)
