"""Lyapunov decrease of the optimal value on the double integrator.

Without disturbances the value decreases strictly to zero.  With uniform
disturbances the slack constant ``c_ell`` is calibrated on one batch of
episodes and the decrease inequality is checked on a fresh batch.

Run with ``python demos/iss_double_integrator.py``.
"""

import numpy as np

from rnmpc import systems
from rnmpc.feasibility_oracle import calibrate_c_ell
from rnmpc.polytope import synth_terminal
from rnmpc.scp import RmpcController, ScpConfig
from rnmpc.sim import DisturbancePolicy, rollout

name = "double_integrator"
m = systems.load_model(name)
C = systems.default_constraints(name)
cost = systems.default_cost(name)
err = systems.stored_error_bound(name, m)
ctrl = RmpcController(m, err, C, cost, synth_terminal(m, cost, err, C), ScpConfig(T=10))
x0 = np.array([2.0, 0.5])

V = rollout(ctrl, m, DisturbancePolicy("zero"), x0, 60, thin=0).V
print("value without disturbance:", np.array2string(V[::10], precision=4))


def decrease(log):
    x = log.x[:-2]
    stage = np.einsum("ka,ab,kb->k", x, cost.Q, x)
    return log.V[1:] - log.V[:-1] + stage, np.abs(log.w[:-1]).max(axis=1)


cal = [decrease(rollout(ctrl, m, DisturbancePolicy("uniform", 1), x0, 40, episode=i, thin=0))
       for i in range(3)]
est = calibrate_c_ell(np.concatenate([c[0] for c in cal]), np.concatenate([c[1] for c in cal]))
fresh = [decrease(rollout(ctrl, m, DisturbancePolicy("vertex", 2), -x0, 40, episode=i, thin=0))
         for i in range(3)]
ok = np.concatenate([lhs <= est.c_ell * w + 1e-9 for lhs, w in fresh])
print(f"c_ell = {est.c_ell:.3f}; decrease holds on {ok.mean():.1%} of {ok.size} fresh steps")
