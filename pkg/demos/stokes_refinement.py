"""Steady Stokes on the staggered grid with a manufactured solution.

The velocity is the curl of a smooth potential that vanishes on the
walls, so the discrete solve should converge at second order.
"""
import numpy as np

from shellfsi.cli_io import fitted_order
from shellfsi.fluid import solve_manufactured_stokes

res = [solve_manufactured_stokes(n) for n in (8, 16, 32)]
for r in res:
    print(f"n={r.n:3d}  velocity L2 {r.velocity_error:.3e}  pressure L2 {r.pressure_error:.3e}  "
          f"({r.info.method}, {r.info.iterations} its)")
h = np.array([1.0 / r.n for r in res])
print(f"velocity order {fitted_order(h, [r.velocity_error for r in res]):.2f}")
