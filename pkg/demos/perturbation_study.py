"""Distance between a reference run and runs with perturbed initial data.

The distance should halve when the perturbation halves, and vanish when
the perturbation is zero.
"""
import tempfile

from shellfsi.cli_io import perturb_pair, preset

sc = preset("perturb", geometry={"n_shell": 8, "n_fluid": 8})
with tempfile.TemporaryDirectory() as tmp:
    res = perturb_pair(sc, [2e-3, 1e-3, 5e-4, 0.0], out_dir=tmp, t_end=0.05)
for row in res.summary:
    ratio = "" if row["ratio_to_next"] is None else f"ratio to next {row['ratio_to_next']:.4f}"
    print(f"eps {row['eps']:.1e}: max distance {row['max_distance']:.3e}  {ratio}")
