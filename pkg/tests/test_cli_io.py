import csv
import json
import struct

import numpy as np
import pytest
import yaml

from shellfsi import cli_io
from shellfsi.cli_io import (EXIT_CONFIG, EXIT_DEGENERATE, EXIT_OK, EXIT_SOLVER, HEADER_SIZE,
                             PRESETS, Snapshot, build_problem, initial_state, lift_velocity,
                             load_scenario, main, parse_snapshot, preset, read_snapshot,
                             scenario_from_dict, snapshot_bytes, snapshot_to_state,
                             state_to_snapshot, write_preset_files, write_snapshot)
from shellfsi.diagnostics import DiagnosticsRecord
from shellfsi.errors import (CompatibilityError, DegenerateGeometry, FormatError, ParseError,
                             SolveFailure)
from shellfsi.mac import LatticeCoefficients, MACGrid, MACOperators

SMALL = {"n_shell": 8, "n_fluid": 8}


@pytest.fixture
def out_root(tmp_path, monkeypatch):
    root = tmp_path / "out"
    monkeypatch.setenv(cli_io.OUTPUT_ROOT_ENV, str(root))
    return root


def write_yaml(path, data):
    path.write_text(yaml.safe_dump(data))
    return path


# scenarios -------------------------------------------------------------------------------
def test_minimal_scenario_gets_defaults():
    sc = scenario_from_dict({})
    assert sc["shell"]["gamma"] == 1.0 and sc["fluid"]["mu"] == 1.0
    assert sc.n == 16 and len(sc.hash) == 8


def test_unknown_key_and_bad_yaml(tmp_path):
    with pytest.raises(ParseError):
        scenario_from_dict({"shell": {"stiffness": 2}})
    bad = tmp_path / "bad.yaml"
    bad.write_text("shell: [unclosed\n")
    with pytest.raises(ParseError):
        load_scenario(bad)
    with pytest.raises(ParseError):
        load_scenario(tmp_path / "missing.yaml")
    with pytest.raises(ParseError):
        scenario_from_dict({"forcing": {"g": {"name": "hurricane"}}})


@pytest.mark.parametrize("data", [
    {"shell": {"eta_star": {"name": "constant", "value": 1.0}}},
    {"shell": {"eta0": {"name": "constant", "value": 0.01}}},
    {"shell": {"eta0": {"name": "sine", "amplitude": 0.3}}},
    {"shell": {"eta_star": {"name": "sine", "amplitude": 0.1}}, "fluid": {"v0": "rest"}},
    {"geometry": {"n_shell": 12, "n_fluid": 12}},
    {"geometry": {"n_shell": 8, "n_fluid": 16}},
    {"geometry": {"kind": "torus"}},
    {"fluid": {"mu": -1.0}},
    {"shell": {"eta0": {"snapshot": "nowhere.bin"}}},
])
def test_incompatible_scenarios(data):
    with pytest.raises(CompatibilityError):
        scenario_from_dict(data)


def test_curved_reference_loads_but_does_not_run():
    sc = scenario_from_dict({"geometry": {"kind": "sphere"}})
    assert sc.geometry().kind.value == "Sphere"
    with pytest.raises(CompatibilityError):
        build_problem(sc)


def test_presets_round_trip_through_yaml(tmp_path):
    paths = write_preset_files(tmp_path)
    assert {p.stem for p in paths} == set(PRESETS)
    for p in paths:
        assert load_scenario(p).data == preset(p.stem).data


def test_lift_velocity_is_solenoidal_with_prescribed_trace():
    sc = preset("free_decay", geometry=SMALL)
    grid = MACGrid(8)
    eta_star = sc.shell_array("eta_star")
    x = lift_velocity(grid, eta_star)
    div = MACOperators(grid).apply_divergence(LatticeCoefficients.identity(grid), x)
    assert np.abs(div).max() < 1e-12
    assert np.array_equal(x[grid.vel_slices[3]].reshape(8, 8), eta_star)


# snapshots -------------------------------------------------------------------------------
def random_snapshot(n=8, seed=0):
    rng = np.random.default_rng(seed)
    return Snapshot(n, 0.25, 1e-3, 7, b"abcdefgh", 3, 1, {
        "eta": rng.normal(size=(n, n)), "eta_dot": rng.normal(size=(n, n)),
        "v": rng.normal(size=3 * n**3), "p": rng.normal(size=(n, n, n))})


def test_snapshot_round_trip_is_bitwise(tmp_path):
    snap = random_snapshot()
    path = write_snapshot(tmp_path / "s.bin", snap)
    back = read_snapshot(path)
    assert snapshot_bytes(back) == path.read_bytes()
    for k, v in snap.fields.items():
        assert np.array_equal(back.fields[k], v)
    assert (back.time, back.dt, back.step, back.easy, back.flags) == (0.25, 1e-3, 7, 3, 1)
    assert len(path.read_bytes()) == HEADER_SIZE + 8 * (2 * 64 + 4 * 512) and HEADER_SIZE == 64


def test_snapshot_format_errors():
    data = snapshot_bytes(random_snapshot())
    bumped = data[:8] + struct.pack("<I", 2) + data[12:]
    with pytest.raises(FormatError, match="version 2 at byte 8"):
        parse_snapshot(bumped)
    with pytest.raises(FormatError, match="byte 100"):
        parse_snapshot(data[:100])
    with pytest.raises(FormatError, match="byte 40"):
        parse_snapshot(data[:40])
    with pytest.raises(FormatError, match="magic"):
        parse_snapshot(b"X" + data[1:])


def test_state_snapshot_state_is_exact():
    sc = preset("free_decay", geometry=SMALL)
    st = initial_state(sc)
    back = snapshot_to_state(parse_snapshot(snapshot_bytes(state_to_snapshot(st, 1e-3, 0, sc.hash))))
    assert np.array_equal(back.shell.eta.values, st.shell.eta.values)
    assert np.array_equal(back.fluid.v, st.fluid.v)


def test_snapshot_as_initial_datum(tmp_path):
    sc = preset("free_decay", geometry=SMALL)
    write_snapshot(tmp_path / "init.bin", state_to_snapshot(initial_state(sc)))
    data = {"geometry": SMALL, "shell": {"eta0": {"snapshot": "init.bin"},
                                         "eta_star": {"snapshot": "init.bin", "field": "eta_dot"}}}
    sc2 = load_scenario(write_yaml(tmp_path / "s.yaml", data))
    assert np.allclose(sc2.shell_array("eta0"), sc.shell_array("eta0"), rtol=0, atol=1e-16)


# drivers ---------------------------------------------------------------------------------
def test_run_writes_csv_snapshots_and_checkpoint(tmp_path):
    sc = preset("free_decay", geometry=SMALL, output={"snapshot_every": 2, "checkpoint_every": 3})
    o = cli_io.run_scenario(sc, out_dir=tmp_path, t_end=0.005)
    assert o.exit_code == EXIT_OK
    with open(tmp_path / "diagnostics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == DiagnosticsRecord.columns() and len(rows) == 6
    assert {p.name for p in tmp_path.glob("*.bin")} == {
        "snap_000000.bin", "snap_000002.bin", "snap_000004.bin", "checkpoint.bin", "final.bin"}
    assert read_snapshot(tmp_path / "checkpoint.bin").flags == cli_io.FLAG_CHECKPOINT
    assert "E0" in json.loads((tmp_path / "checkpoint.json").read_text())


def test_restart_from_other_scenario_is_rejected(tmp_path):
    sc = preset("free_decay", geometry=SMALL, output={"checkpoint_every": 1})
    cli_io.run_scenario(sc, out_dir=tmp_path, max_steps=1)
    other = preset("free_decay", geometry=SMALL, fluid={"mu": 2.0})
    with pytest.raises(CompatibilityError):
        cli_io.run_scenario(other, out_dir=tmp_path, restart=tmp_path / "checkpoint.bin")


def test_fitted_order():
    h = np.array([0.1, 0.05, 0.025])
    assert cli_io.fitted_order(h, 3 * h**2) == pytest.approx(2.0)


# command line ----------------------------------------------------------------------------
def test_cli_run_and_diagnose(tmp_path, out_root, capsys):
    scen = write_yaml(tmp_path / "s.yaml", {**PRESETS["free_decay"], "geometry": SMALL,
                                            "time": {"t_end": 0.004, "dt0": 1e-3, "adaptive": False}})
    assert main(["run", str(scen)]) == EXIT_OK
    run_dir = out_root / "free_decay"
    assert (run_dir / "diagnostics.csv").is_file()
    assert main(["diagnose", str(run_dir)]) == EXIT_OK
    summary = json.loads((run_dir / "diagnose.json").read_text())
    assert summary["energy_inequality_holds"] and summary["steps"] == 4


def test_cli_dispersion_and_refine(tmp_path, out_root, capsys):
    scen = write_yaml(tmp_path / "s.yaml", {"dispersion": {"n": 8}, "refine": {"base": 8},
                                            "output": {"dir": "study"}})
    assert main(["dispersion", str(scen)]) == EXIT_OK
    rows = list(csv.DictReader(open(out_root / "study" / "dispersion.csv")))
    assert max(float(r["rel_error"]) for r in rows) < 0.02
    assert main(["refine", str(scen), "--levels", "2"]) == EXIT_OK
    summary = json.loads((out_root / "study" / "refine_summary.json").read_text())
    assert summary["velocity_order"] > 1.5


def test_cli_perturb_pair(tmp_path, out_root, capsys):
    data = {**PRESETS["perturb"], "geometry": SMALL,
            "time": {"t_end": 0.01, "dt0": 2e-3, "adaptive": False}}
    scen = write_yaml(tmp_path / "s.yaml", data)
    assert main(["perturb-pair", str(scen), "--eps", "1e-3", "--eps", "5e-4"]) == EXIT_OK
    rows = list(csv.DictReader(open(out_root / "perturb" / "perturb_pair" / "summary.csv")))
    assert float(rows[0]["ratio_to_next"]) == pytest.approx(2.0, rel=0.2)


def test_cli_config_errors(tmp_path, out_root, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("time: {t_end: -1}\n")
    assert main(["run", str(bad)]) == EXIT_CONFIG
    assert main(["run", str(tmp_path / "none.yaml")]) == EXIT_CONFIG
    assert main(["perturb-pair", str(bad)]) == EXIT_CONFIG
    assert main(["launch"]) == EXIT_CONFIG
    assert main(["diagnose", str(tmp_path)]) == EXIT_CONFIG


@pytest.mark.parametrize("exc,code", [(SolveFailure("x"), EXIT_SOLVER),
                                      (DegenerateGeometry("x"), EXIT_DEGENERATE)])
def test_cli_error_mapping(tmp_path, out_root, monkeypatch, capsys, exc, code):
    def boom(*a, **k):
        raise exc

    monkeypatch.setattr(cli_io, "run_scenario", boom)
    scen = write_yaml(tmp_path / "s.yaml", {"geometry": SMALL})
    assert main(["run", str(scen)]) == code


def test_cli_collapse_exit_code(tmp_path, out_root, capsys):
    scen = write_yaml(tmp_path / "c.yaml", {**PRESETS["collapse"], "geometry": SMALL})
    assert main(["run", str(scen)]) == EXIT_DEGENERATE
    report = json.loads((out_root / "collapse" / "margins.json").read_text())
    assert report["margins"]["crossed"]
    assert main(["diagnose", str(out_root / "collapse")]) == EXIT_DEGENERATE
