"""Rocket landing: robust controller against the slack-penalised baseline.

Uses the bundled ``configs/rocket_soft.toml`` scenario (vertex disturbances,
simplified robust mode) and prints the comparison table.  Takes about 20 s.

Run with ``python demos/rocket_vs_soft.py``.
"""

from pathlib import Path

from rnmpc.config import build_problem, load_scenario
from rnmpc.sim import compare, rollout

cfg = load_scenario(Path(__file__).resolve().parents[1] / "configs" / "rocket_soft.toml")
prob = build_problem(cfg)
dp = cfg.disturbance_policy()
x0 = cfg.initial_states(prob.model.n_x)[0]

robust = rollout(prob.controller(), prob.model, dp, x0, cfg.steps, thin=0)
soft = rollout(prob.soft_controller(), prob.model, dp, x0, cfg.steps, thin=0)
print(compare([robust], [soft], prob.model.velocity_idx).to_markdown())
print(f"final altitude robust {robust.x[-1, 2]:.3f} m, soft {soft.x[-1, 2]:.3f} m")
