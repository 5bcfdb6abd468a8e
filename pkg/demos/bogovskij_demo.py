"""One Bogovskij operator serving several deformed domains.

For each displacement the operator returns a face field whose divergence
is the datum minus its mean carried by a fixed bump, and which vanishes
on every face touching the boundary.
"""
import numpy as np

from shellfsi.geometry import DisplacementField
from shellfsi.operators import BogovskijOperator

TWO_PI = 2 * np.pi
bog = BogovskijOperator(16)


def datum(x1, x2, x3):
    return 1.0 + np.sin(TWO_PI * x1) * x3


for amp in (0.0, 0.05, 0.1, -0.1):
    eta = DisplacementField.from_function(lambda y: amp * np.cos(TWO_PI * y[..., 0]), 16)
    res = bog.apply(eta, datum)
    err = np.abs(bog.divergence(res) - res.rhs)[res.mask].max()
    print(f"amplitude {amp:+.2f}: cells {res.mask.sum():5d}  divergence error {err:.1e}  "
          f"boundary values {bog.boundary_values(res):.1e}  W12 norm {bog.w12_norm(res):.3f}")
