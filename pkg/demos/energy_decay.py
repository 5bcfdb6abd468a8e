"""Energy bookkeeping of an unforced coupled run.

Without forcing the total energy can only decrease; the audit compares
each step's energy change with the physical and numerical dissipation.
"""
import numpy as np

from shellfsi.cli_io import build_problem, fixed_point_config, initial_state, preset
from shellfsi.diagnostics import energy_audit
from shellfsi.stepper import run

sc = preset("free_decay")
problem = build_problem(sc)
res = run(problem, initial_state(sc, problem), 0.05, 1e-3, fixed_point_config(sc))
rows = energy_audit(res.records)
for r in rows[::10] + rows[-1:]:
    print(f"t={r.t:.3f}  E={r.energy:.8f}  step excess {r.step_defect:+.2e}  "
          f"cumulative defect {r.cumulative_defect:+.2e}")
print("violations:", sum(r.violated for r in rows))
num = np.array([rec.numerical_dissipation for rec in res.records])
print(f"numerical dissipation rate: max {num.max():.2e}")
