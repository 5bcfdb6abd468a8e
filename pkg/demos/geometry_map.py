"""Hanzawa map on the three reference shapes.

Moves a wavy displacement into each reference domain, inverts the map on
random points, and shows the Piola defect of the cofactor matrix shrinking
like h^2 as the grid is refined.
"""
import numpy as np

from shellfsi.cli_io import fitted_order
from shellfsi.geometry import (DisplacementField, ReferenceGeometry, degeneracy_margins,
                               hanzawa_map, inverse_hanzawa_map, piola_divergence)

TWO_PI = 2 * np.pi
shapes = {
    "flat plate": (ReferenceGeometry("FlatPlate"),
                   lambda y: 0.05 * np.sin(TWO_PI * y[..., 0]) * np.cos(TWO_PI * y[..., 1])),
    "cylinder": (ReferenceGeometry("Cylinder"),
                 lambda y: 0.05 * np.sin(TWO_PI * y[..., 0]) * np.cos(TWO_PI * y[..., 1])),
    # c x z / r^2 restricted to the sphere, smooth at the poles
    "sphere": (ReferenceGeometry("Sphere"),
               lambda y: 0.05 * np.sin(np.pi * y[..., 1]) * np.cos(np.pi * y[..., 1])
               * np.cos(TWO_PI * y[..., 0])),
}

rng = np.random.default_rng(0)
for name, (geom, func) in shapes.items():
    eta = DisplacementField.from_function(func, 64, analytic=True)
    if name == "flat plate":
        x = rng.uniform(0, 1, (1000, 3))
    else:
        y = rng.uniform(0.02, 0.98, (1000, 2))
        x = geom.boundary_point(y) + rng.uniform(-0.9, -0.01, (1000, 1)) * geom.normal(y)
    err = np.abs(inverse_hanzawa_map(geom, eta, hanzawa_map(geom, eta, x)) - x).max()
    ns = np.array([16, 32, 64])
    d = [piola_divergence(geom, eta, n, norm="l2") for n in ns]
    m = degeneracy_margins(geom, eta)
    print(f"{name:10s}  round trip {err:.1e}  Piola defect "
          f"{' '.join(f'{v:.2e}' for v in d)}  order {fitted_order(1.0 / ns, d):.2f}  "
          f"min n.n_eta {m.min_normal_dot:.4f}")
