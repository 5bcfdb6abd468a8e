"""Degeneracy detection and checkpoint restart through the file driver.

A strong downward pull drives the plate out of the admissible tube; the
run stops with exit code 2 and a margin report.  A second run is cut
short and resumed from its checkpoint, matching the uninterrupted run
byte for byte.
"""
import filecmp
import json
import tempfile
from pathlib import Path

from shellfsi.cli_io import preset, run_scenario

small = {"n_shell": 8, "n_fluid": 8}
with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    out = run_scenario(preset("collapse", geometry=small), out_dir=tmp / "collapse")
    print("collapse exit code:", out.exit_code)
    print(json.dumps(json.loads((tmp / "collapse" / "margins.json").read_text())["margins"], indent=1))

    sc = preset("free_decay", geometry=small, output={"checkpoint_every": 10})
    run_scenario(sc, out_dir=tmp / "full")
    run_scenario(sc, out_dir=tmp / "cut", max_steps=15)
    run_scenario(sc, out_dir=tmp / "cut", restart=tmp / "cut" / "checkpoint.bin")
    for f in ("final.bin", "diagnostics.csv"):
        print(f, "identical after restart:", filecmp.cmp(tmp / "full" / f, tmp / "cut" / f, shallow=False))
