"""Coupled plate and fluid: one fixed-point solve per step.

Runs a short stretch of the swirl-driven reference scenario on a coarse
grid, printing the iteration count and the contraction ratio of every
step, then shows that a huge step makes the iteration diverge.
"""
from shellfsi.cli_io import build_problem, fixed_point_config, initial_state, preset
from shellfsi.errors import NoContraction
from shellfsi.stepper import fixed_point_step, run

sc = preset("reference", geometry={"n_shell": 16, "n_fluid": 16})
problem = build_problem(sc)
state = initial_state(sc, problem)
cfg = fixed_point_config(sc)

res = run(problem, state, 0.01, 1e-3, cfg)
for rec in res.records:
    print(f"t={rec.t:.3f}  iterations {rec.iterations}  ratio {rec.max_ratio:.3f}  "
          f"energy {rec.energy_after:.6f}  kinematic residual {rec.kinematic_residual:.1e}")

try:
    fixed_point_step(problem, state, cfg, 10.0)
except NoContraction as exc:
    print(f"dt = 10: {exc}")
