"""Scenario files, field snapshots, checkpoints and experiment drivers.

Scenarios are YAML mappings with the sections geometry, shell, fluid,
forcing, time and output (plus optional dispersion and perturbation
sections).  Every field entering a run comes from a named family in the
expression registry or from a snapshot file, so each test field is
reproducible from its name and parameters.
"""
from dataclasses import dataclass, field
import argparse
import copy
import csv
import hashlib
import json
import logging
import math
import os
from pathlib import Path
import struct
import sys

import numpy as np
import yaml

from .errors import (
    CompatibilityError,
    DegenerateGeometry,
    DtUnderflow,
    FormatError,
    InvalidPair,
    MarginExceeded,
    NoContraction,
    ParseError,
    ShellFSIError,
    SolveFailure,
)

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "SHELLFSI_OUTPUT_ROOT"

EXIT_OK = 0
EXIT_DEGENERATE = 2
EXIT_SOLVER = 3
EXIT_CONFIG = 4


# -- expression registry --------------------------------------------------------
def _phase(y, k1, k2, phase):
    return 2 * np.pi * (k1 * y[..., 0] + k2 * y[..., 1]) + phase


def _shell_zero():
    return lambda y: np.zeros(np.shape(y)[:-1])


def _shell_constant(value=0.0):
    return lambda y: np.full(np.shape(y)[:-1], float(value))


def _shell_sine(amplitude=0.01, k1=1, k2=0, phase=0.0):
    return lambda y: amplitude * np.sin(_phase(y, k1, k2, phase))


def _shell_cosine(amplitude=0.01, k1=1, k2=0, phase=0.0):
    return lambda y: amplitude * np.cos(_phase(y, k1, k2, phase))


def _shell_modes(amplitude=0.01, kmax=3, seed=0):
    """Random smooth field: modes |k|_inf <= kmax with 1/|k|^3 decay, sup = amplitude."""
    rng = np.random.default_rng(seed)
    ks = [(a, b) for a in range(-kmax, kmax + 1) for b in range(-kmax, kmax + 1) if (a, b) != (0, 0)]
    coef = rng.standard_normal((len(ks), 2))
    g = (np.arange(64) + 0.5) / 64
    probe = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1)

    def raw(y):
        out = np.zeros(np.shape(y)[:-1])
        for (a, b), (c, s) in zip(ks, coef):
            ph = _phase(y, a, b, 0.0)
            out = out + (c * np.cos(ph) + s * np.sin(ph)) / (a * a + b * b) ** 1.5
        return out

    scale = amplitude / np.max(np.abs(raw(probe)))
    return lambda y: scale * raw(y)


SHELL_FAMILIES = {
    "zero": _shell_zero,
    "constant": _shell_constant,
    "sine": _shell_sine,
    "cosine": _shell_cosine,
    "modes": _shell_modes,
}


def _g_zero():
    return lambda t, y1, y2: np.zeros(np.shape(y1))


def _g_standing(amplitude=1.0, k1=1, k2=0, omega=0.0):
    return lambda t, y1, y2: amplitude * np.sin(2 * np.pi * (k1 * y1 + k2 * y2)) * np.cos(omega * t)


def _g_pull(amplitude=1e3, k1=1, k2=0, ramp=0.0):
    """Steady (optionally ramped) load pushing one mode toward collapse."""

    def g(t, y1, y2):
        s = 1.0 if ramp <= 0 else min(t / ramp, 1.0)
        return -amplitude * s * np.cos(2 * np.pi * (k1 * y1 + k2 * y2))

    return g


SHELL_FORCING = {"zero": _g_zero, "standing": _g_standing, "pull": _g_pull}


def _f_zero():
    return None


def _f_shear(amplitude=1.0, k=1, omega=0.0):
    def f(t, x1, x2, x3):
        a = amplitude * np.cos(omega * t)
        z = np.zeros(np.shape(x3))
        return (a * np.sin(np.pi * x3) * np.cos(2 * np.pi * k * x2), z, z)

    return f


def _f_swirl(amplitude=1.0, omega=0.0):
    def f(t, x1, x2, x3):
        a = amplitude * np.cos(omega * t)
        z = np.zeros(np.shape(x3))
        return (a * np.sin(2 * np.pi * x2) * np.sin(np.pi * x3),
                a * np.sin(2 * np.pi * x1) * np.sin(np.pi * x3), z)

    return f


BODY_FORCING = {"zero": _f_zero, "shear": _f_shear, "swirl": _f_swirl}

FLUID_FAMILIES = ("rest", "lift")


def _build(registry, spec, what):
    if spec is None:
        spec = {"name": "zero"}
    if isinstance(spec, str):
        spec = {"name": spec}
    if not isinstance(spec, dict) or "name" not in spec:
        raise ParseError(f"{what}: expected a mapping with a 'name' key, got {spec!r}")
    name = spec["name"]
    if name not in registry:
        raise ParseError(f"{what}: unknown family {name!r} (known: {', '.join(sorted(registry))})")
    params = {k: v for k, v in spec.items() if k != "name"}
    try:
        return registry[name](**params)
    except TypeError as exc:
        raise ParseError(f"{what}: bad parameters for {name!r}: {exc}") from exc


# -- scenario -----------------------------------------------------------------------
DEFAULTS = {
    "geometry": {"kind": "flat_plate", "L": 0.5, "alpha": None, "n_shell": 16, "n_fluid": 16},
    "shell": {"rho": 1.0, "gamma": 1.0, "alpha_el": 1.0, "eta0": {"name": "zero"},
              "eta_star": {"name": "zero"}},
    "fluid": {"rho": 1.0, "mu": 1.0, "v0": {"name": "lift"}},
    "forcing": {"f": {"name": "zero"}, "g": {"name": "zero"}},
    "time": {"t_end": 0.1, "dt0": 1e-3, "dt_min": 1e-7, "dt_max": None, "adaptive": True,
             "max_iters": 50, "tol": 1e-8, "contraction_window": 3, "cfl": 1.0,
             "margin_threshold": 1e-3, "solver": "auto"},
    "output": {"dir": "run", "snapshot_every": 0, "checkpoint_every": 0},
    "dispersion": {"modes": [[1, 0]], "dt": 1e-4, "n": 32},
    "refine": {"base": 16},
    "perturbation": {"target": "eta0", "shape": {"name": "sine", "amplitude": 1.0, "k1": 1}},
    "seed": 0,
}

_COMPAT_TOL = 1e-6


def _merge(base, over, path=""):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if k not in base:
            raise ParseError(f"unknown key {path + k!r}")
        if isinstance(base[k], dict) and "name" not in base[k] and isinstance(v, dict):
            out[k] = _merge(base[k], v, path + k + ".")
        else:
            out[k] = v
    return out


@dataclass
class Scenario:
    """Validated scenario (the merged mapping plus derived callables)."""

    data: dict
    source: str = None
    base_dir: Path = field(default_factory=Path.cwd)

    def __getitem__(self, key):
        return self.data[key]

    @property
    def n(self):
        return int(self.data["geometry"]["n_fluid"])

    @property
    def hash(self):
        """First 8 bytes of the SHA-256 of the canonical mapping."""
        blob = json.dumps(self.data, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).digest()[:8]

    def with_changes(self, **sections):
        d = copy.deepcopy(self.data)
        for sec, vals in sections.items():
            if isinstance(d.get(sec), dict) and isinstance(vals, dict):
                d[sec].update(vals)
            else:
                d[sec] = vals
        return Scenario(d, self.source, self.base_dir)

    # field builders
    def _field_spec(self, spec, what):
        if isinstance(spec, dict) and "snapshot" in spec:
            snap = read_snapshot(self.base_dir / spec["snapshot"])
            key = spec.get("field", "eta")
            if key not in ("eta", "eta_dot"):
                raise ParseError(f"{what}: snapshot field must be 'eta' or 'eta_dot'")
            return snap.fields[key]
        return _build(SHELL_FAMILIES, spec, what)

    def shell_array(self, key):
        from .geometry import DisplacementField

        f = self._field_spec(self.data["shell"][key], f"shell.{key}")
        if isinstance(f, np.ndarray):
            return f.copy()
        n = self.n
        y = DisplacementField.zeros(n).positions()
        return np.asarray(f(y), dtype=float) * np.ones((n, n))

    def shell_forcing(self):
        spec = self.data["forcing"]["g"]
        if isinstance(spec, dict) and "snapshot" in spec:
            prof = self._field_spec(spec, "forcing.g")
            return lambda t, y1, y2: prof
        return _build(SHELL_FORCING, spec, "forcing.g")

    def body_force(self):
        return _build(BODY_FORCING, self.data["forcing"]["f"], "forcing.f")


def _is_pow2(n):
    return isinstance(n, int) and n > 0 and n & (n - 1) == 0


def _check_files(node, base, where=""):
    if isinstance(node, dict):
        for k, v in node.items():
            if k == "snapshot":
                p = base / v
                if not p.is_file():
                    raise CompatibilityError(f"{where}snapshot: referenced file {str(p)!r} does not exist")
            else:
                _check_files(v, base, f"{where}{k}.")


def validate(sc):
    """Check invariants and initial-data compatibility; raises CompatibilityError."""
    d = sc.data
    g = d["geometry"]
    if g["kind"] not in ("flat_plate", "cylinder", "sphere"):
        raise CompatibilityError(f"geometry.kind {g['kind']!r} is not one of flat_plate, cylinder, sphere")
    for key in ("n_shell", "n_fluid"):
        n = g[key]
        if not (_is_pow2(n) and 8 <= n <= 128):
            raise CompatibilityError(f"geometry.{key} = {n!r}: grid sizes must be powers of two in [8, 128]")
    if g["n_shell"] != g["n_fluid"]:
        raise CompatibilityError("geometry.n_shell must equal geometry.n_fluid (the shell lives on the "
                                 "lateral fluid grid)")
    for sec, keys in (("shell", ("rho", "gamma", "alpha_el")), ("fluid", ("rho", "mu"))):
        for k in keys:
            if not (isinstance(d[sec][k], (int, float)) and d[sec][k] > 0):
                raise CompatibilityError(f"{sec}.{k} must be a positive number, got {d[sec][k]!r}")
    t = d["time"]
    if not (t["t_end"] > 0 and t["dt0"] > 0):
        raise CompatibilityError("time.t_end and time.dt0 must be positive")
    _check_files(d, sc.base_dir)
    try:
        geom = sc.geometry()
    except ValueError as exc:
        raise CompatibilityError(f"geometry: {exc}") from exc
    # resolve every named family once so typos surface at load time
    sc.body_force()
    sc.shell_forcing()
    eta0 = sc.shell_array("eta0")
    eta_star = sc.shell_array("eta_star")
    v0 = d["fluid"]["v0"]
    v0_name = v0["name"] if isinstance(v0, dict) else v0
    if v0_name not in FLUID_FAMILIES:
        raise ParseError(f"fluid.v0: unknown family {v0_name!r} (known: {', '.join(FLUID_FAMILIES)})")
    if abs(eta_star.mean()) > _COMPAT_TOL:
        raise CompatibilityError(
            f"shell.eta_star has mean {eta_star.mean():.6g}: a divergence-free v0 with "
            "v0 o phi_eta0 = eta_star n on the shell and no-slip walls carries zero net flux, "
            "so int eta_star dy must vanish (Gauss constraint)")
    if abs(eta0.mean()) > _COMPAT_TOL:
        raise CompatibilityError(f"shell.eta0 has mean {eta0.mean():.6g}; displacements must have "
                                 "zero mean (the enclosed volume is conserved)")
    if np.max(np.abs(eta0)) >= geom.alpha:
        raise CompatibilityError(f"|eta0|_inf = {np.max(np.abs(eta0)):.4g} is not below the tube margin "
                                 f"alpha = {geom.alpha:.4g}")
    if v0_name == "rest" and np.max(np.abs(eta_star)) > _COMPAT_TOL:
        raise CompatibilityError("fluid.v0 = rest requires eta_star = 0 (trace condition "
                                 "v0 o phi_eta0 = eta_star n on the shell)")
    return sc


def load_scenario(path):
    """Read, merge with defaults and validate a YAML scenario."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read scenario {str(path)!r}: {exc}") from exc
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ParseError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ParseError(f"{path}: top level must be a mapping")
    sc = Scenario(_merge(DEFAULTS, raw), str(path), path.parent)
    return validate(sc)


def scenario_from_dict(data, base_dir=None):
    sc = Scenario(_merge(DEFAULTS, data), None, Path(base_dir) if base_dir else Path.cwd())
    return validate(sc)


def _geometry(self):
    from .geometry import GeometryKind, ReferenceGeometry

    g = self.data["geometry"]
    kind = {"flat_plate": GeometryKind.FLAT_PLATE, "cylinder": GeometryKind.CYLINDER,
            "sphere": GeometryKind.SPHERE}[g["kind"]]
    return ReferenceGeometry(kind=kind, L=float(g["L"]),
                             alpha=None if g["alpha"] is None else float(g["alpha"]))


Scenario.geometry = _geometry


def build_problem(sc):
    """CoupledProblem for a FlatPlate scenario."""
    from .fluid import FluidParams
    from .mac import MACGrid
    from .shell import ShellParams
    from .stepper import CoupledProblem

    geom = sc.geometry()
    if geom.kind.name != "FLAT_PLATE":
        raise CompatibilityError("coupled runs are implemented for the flat_plate reference only")
    s, f = sc["shell"], sc["fluid"]
    return CoupledProblem(
        geom, MACGrid(sc.n),
        shell_params=ShellParams(rho=float(s["rho"]), gamma=float(s["gamma"]), alpha=float(s["alpha_el"])),
        fluid_params=FluidParams(rho=float(f["rho"]), mu=float(f["mu"])),
        body_force=sc.body_force(), shell_force=sc.shell_forcing(),
    )


def lift_velocity(grid, eta_star):
    """Discretely divergence-free velocity with top values eta_star e3.

    v3 = eta_star q(z) with q = 3 z^2 - 2 z^3, and the lateral part is the
    face gradient of the five-point inverse Laplacian of eta_star, scaled
    level by level so the MAC divergence vanishes in every cell.
    """
    n, h = grid.n, grid.h
    k = np.fft.fftfreq(n, d=1.0 / n)
    sym = -(4 / h**2) * (np.sin(np.pi * k[:, None] / n) ** 2 + np.sin(np.pi * k[None, :] / n) ** 2)
    sym[0, 0] = 1.0
    hat = np.fft.fft2(eta_star - eta_star.mean()) / sym
    hat[0, 0] = 0.0
    psi = np.real(np.fft.ifft2(hat))
    z = np.arange(n + 1) * h
    q = 3 * z**2 - 2 * z**3
    dq = (q[1:] - q[:-1]) / h
    v3 = q[:, None, None] * eta_star[None]
    g1 = (psi - np.roll(psi, 1, axis=0)) / h
    g2 = (psi - np.roll(psi, 1, axis=1)) / h
    v1 = -dq[:, None, None] * g1[None]
    v2 = -dq[:, None, None] * g2[None]
    return grid.pack(v1, v2, v3)


def initial_state(sc, problem=None):
    from .fluid import FluidState
    from .geometry import DisplacementField
    from .shell import ShellState
    from .stepper import CoupledState

    problem = problem or build_problem(sc)
    eta0 = sc.shell_array("eta0")
    eta_star = sc.shell_array("eta_star")
    v0 = sc["fluid"]["v0"]
    name = v0["name"] if isinstance(v0, dict) else v0
    grid = problem.grid
    x = np.zeros(grid.nvel) if name == "rest" else lift_velocity(grid, eta_star)
    top = x[grid.vel_slices[3]].reshape(grid.n, grid.n)
    if np.max(np.abs(top - eta_star)) > _COMPAT_TOL:
        raise CompatibilityError("initial velocity trace differs from eta_star n on the shell")
    shell = ShellState(DisplacementField(eta0), DisplacementField(eta_star), 0.0)
    return CoupledState(shell, FluidState(x, np.zeros((grid.n,) * 3), 0.0), 0.0, 0)


# -- snapshots --------------------------------------------------------------------------
MAGIC = b"SHFSISNP"
VERSION = 1
_HEADER = struct.Struct("<8sIIIIddQ8sII")  # 64 bytes
HEADER_SIZE = _HEADER.size
FIELD_ORDER = ("eta", "eta_dot", "v", "p")
FLAG_CHECKPOINT = 1


@dataclass
class Snapshot:
    n: int
    time: float
    dt: float
    step: int
    scenario_hash: bytes
    easy: int
    flags: int
    fields: dict


def _field_sizes(n):
    return {"eta": n * n, "eta_dot": n * n, "v": 3 * n**3, "p": n**3}


def _field_shapes(n):
    return {"eta": (n, n), "eta_dot": (n, n), "v": (3 * n**3,), "p": (n, n, n)}


def snapshot_bytes(snap):
    n = snap.n
    head = _HEADER.pack(MAGIC, VERSION, n, n, len(FIELD_ORDER), float(snap.time), float(snap.dt),
                        int(snap.step), bytes(snap.scenario_hash).ljust(8, b"\0")[:8],
                        int(snap.easy), int(snap.flags))
    body = b"".join(np.ascontiguousarray(snap.fields[k], dtype="<f8").tobytes() for k in FIELD_ORDER)
    return head + body


def write_snapshot(path, snap):
    """Atomic write (temporary file + rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(snapshot_bytes(snap))
    os.replace(tmp, path)
    return path


def parse_snapshot(data):
    if len(data) < HEADER_SIZE:
        raise FormatError(f"truncated header: file ends at byte {len(data)}, header needs {HEADER_SIZE}")
    magic, version, n, n3, nf, t, dt, step, shash, easy, flags = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte 0")
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at byte 8 (expected {VERSION})")
    if n3 != n or nf != len(FIELD_ORDER):
        raise FormatError(f"inconsistent dimensions at byte 12: N = {n}, N3 = {n3}, fields = {nf}")
    sizes, shapes = _field_sizes(n), _field_shapes(n)
    need = HEADER_SIZE + 8 * sum(sizes.values())
    if len(data) < need:
        raise FormatError(f"truncated payload: file ends at byte {len(data)}, expected {need} bytes")
    if len(data) > need:
        raise FormatError(f"trailing data after byte {need}")
    fields_, off = {}, HEADER_SIZE
    for k in FIELD_ORDER:
        arr = np.frombuffer(data, dtype="<f8", count=sizes[k], offset=off).astype(np.float64)
        fields_[k] = arr.reshape(shapes[k])
        off += 8 * sizes[k]
    return Snapshot(n, t, dt, step, shash, easy, flags, fields_)


def read_snapshot(path):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read snapshot {str(path)!r}: {exc}") from exc
    return parse_snapshot(data)


def state_to_snapshot(state, dt=0.0, easy=0, scenario_hash=b"", flags=0):
    n = state.shell.eta.values.shape[0]
    return Snapshot(n, state.t, dt, state.step, scenario_hash, easy, flags, {
        "eta": state.shell.eta.values, "eta_dot": state.shell.eta_dot.values,
        "v": state.fluid.v, "p": state.fluid.p})


def snapshot_to_state(snap):
    from .fluid import FluidState
    from .geometry import DisplacementField
    from .shell import ShellState
    from .stepper import CoupledState

    f = snap.fields
    def restore(values):
        # stored fields are already mean-free; re-centering would perturb the last bits
        d = DisplacementField(values.copy(), zero_mean=False)
        d.zero_mean = True
        return d

    shell = ShellState(restore(f["eta"]), restore(f["eta_dot"]), snap.time)
    return CoupledState(shell, FluidState(f["v"].copy(), f["p"].copy(), snap.time), snap.time, snap.step)


# -- drivers ---------------------------------------------------------------------------------
def output_root():
    return Path(os.environ.get(OUTPUT_ROOT_ENV, ".")).resolve()


def output_dir(sc, sub=None):
    d = output_root() / sc["output"]["dir"]
    if sub:
        d = d / sub
    d.mkdir(parents=True, exist_ok=True)
    return d


def fixed_point_config(sc):
    from .stepper import FixedPointConfig

    t = sc["time"]
    kw = dict(max_iters=int(t["max_iters"]), tol=float(t["tol"]),
              contraction_window=int(t["contraction_window"]), dt_min=float(t["dt_min"]),
              dt_max=math.inf if t["dt_max"] is None else float(t["dt_max"]),
              cfl=float(t["cfl"]), margin_threshold=float(t["margin_threshold"]), solver=t["solver"])
    if not t["adaptive"]:
        kw.update(easy_steps=2**62, cfl=math.inf)
    return FixedPointConfig(**kw)


def data_norms(problem, t, dt):
    """Squared L2 norms of f (reference samples) and g (mid-step) for one step."""
    g = problem.shell_forcing(t - 0.5 * dt)
    g_sq = float(np.mean(g**2))
    f_sq = 0.0
    if problem.body_force is not None:
        grid = problem.grid
        fx = grid.sample_velocity(lambda a, b, c: problem.body_force(t, a, b, c))
        f_sq = float(np.sum(problem.ops.mass_diag(problem.identity) * fx**2))
    return f_sq, g_sq


def _row(rec):
    return [float(v) if isinstance(v, (float, np.floating)) else int(v) for v in rec.row()]


_MONITOR_KEYS = ("E0", "cum", "sup", "rhs0", "data_norm")


def _monitor_state(mon):
    return {k: getattr(mon, k) for k in _MONITOR_KEYS}


def _restore_monitor(problem, state, saved):
    from .diagnostics import DiagnosticsMonitor

    mon = DiagnosticsMonitor(problem, state)
    for k in _MONITOR_KEYS:
        setattr(mon, k, copy.deepcopy(saved[k]))
    mon.records = []
    return mon


@dataclass
class RunOutcome:
    status: str
    out_dir: Path
    result: object = None
    monitor: object = None
    error: Exception = None
    margins: object = None

    @property
    def exit_code(self):
        return {"ok": EXIT_OK, "degenerate": EXIT_DEGENERATE}.get(self.status, EXIT_SOLVER)


def _margin_dict(m, threshold, geom):
    """Margin report; tube_margin = alpha - |eta|_inf is the admissible-tube reserve."""
    d = {k: float(getattr(m, k)) for k in ("min_normal_dot", "min_area_element", "height_margin", "lipschitz")}
    d["tube_margin"] = d["height_margin"] - (geom.L - geom.alpha)
    d["threshold"] = threshold
    d["near_degenerate"] = bool(m.near_degenerate)
    crossed = [k for k in ("min_normal_dot", "min_area_element", "height_margin") if d[k] <= threshold]
    if d["tube_margin"] <= 0.0:
        crossed.append("tube_margin")
    d["crossed"] = crossed
    return d


def run_scenario(sc, restart=None, out_dir=None, max_steps=None, t_end=None):
    """Single run: diagnostics.csv, periodic snapshots and checkpoints.

    ``restart`` is a checkpoint file; the run resumes from it with the
    stored step size and adaptivity counter, the CSV is truncated to the
    checkpoint step and the cumulative diagnostics are restored.
    """
    from .diagnostics import DiagnosticsMonitor, DiagnosticsRecord
    from .stepper import run

    problem = build_problem(sc)
    cfg = fixed_point_config(sc)
    out = Path(out_dir) if out_dir else output_dir(sc)
    out.mkdir(parents=True, exist_ok=True)
    t_end = float(sc["time"]["t_end"]) if t_end is None else float(t_end)
    csv_path = out / "diagnostics.csv"
    o = sc["output"]
    snap_every, ckpt_every = int(o["snapshot_every"]), int(o["checkpoint_every"])
    if restart is not None:
        snap = read_snapshot(restart)
        if snap.scenario_hash != sc.hash:
            raise CompatibilityError("checkpoint was written by a different scenario")
        state = snapshot_to_state(snap)
        dt0, easy = snap.dt, snap.easy
        saved = json.loads(Path(restart).with_suffix(".json").read_text())
        monitor = _restore_monitor(problem, state, saved)
        with open(csv_path, newline="") as fh:
            rows = list(csv.reader(fh))
        keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) <= snap.step]
        with open(csv_path, "w", newline="") as fh:
            csv.writer(fh).writerows(keep)
    else:
        state = initial_state(sc, problem)
        dt0, easy = float(sc["time"]["dt0"]), 0
        monitor = DiagnosticsMonitor(problem, state)
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(DiagnosticsRecord.columns())
            w.writerow(_row(monitor.records[0]))
        if snap_every:
            write_snapshot(out / f"snap_{0:06d}.bin", state_to_snapshot(state, dt0, 0, sc.hash))

    fh = open(csv_path, "a", newline="")
    writer = csv.writer(fh)

    def on_step(st, rec, dt_next, easy_next):
        f_sq, g_sq = data_norms(problem, st.t, rec.dt)
        r = monitor.update(st, rec, f_sq, g_sq)
        writer.writerow(_row(r))
        fh.flush()
        log.info("step %d t=%.6g dt=%.4g iters=%d ratio=%.3g n.n_eta=%.4g L-|eta|=%.4g E=%.10g",
                 r.step, r.t, r.dt, r.iterations, r.max_ratio, r.min_normal_dot, r.height_margin, r.energy)
        if snap_every and st.step % snap_every == 0:
            write_snapshot(out / f"snap_{st.step:06d}.bin", state_to_snapshot(st, dt_next, easy_next, sc.hash))
        if ckpt_every and st.step % ckpt_every == 0:
            write_checkpoint(out / "checkpoint.bin", st, dt_next, easy_next, sc.hash, monitor)

    try:
        res = run(problem, state, t_end, dt0, cfg, easy=easy, keep_states=False, on_step=on_step,
                  max_steps=max_steps)
    finally:
        fh.close()
    outcome = RunOutcome(res.status, out, res, monitor, res.error)
    if res.status == "degenerate":
        m = getattr(res.error, "margins", None)
        outcome.margins = _margin_dict(m, cfg.margin_threshold, problem.geom) if m is not None else None
        report = {"status": "degenerate", "t": res.final.t, "step": res.final.step,
                  "message": str(res.error), "margins": outcome.margins}
        (out / "margins.json").write_text(json.dumps(report, indent=2))
    write_snapshot(out / "final.bin", state_to_snapshot(res.final, res.dt, res.easy, sc.hash))
    return outcome


def write_checkpoint(path, state, dt, easy, scenario_hash, monitor):
    path = Path(path)
    side = path.with_suffix(".json")
    tmp = side.with_name(side.name + ".tmp")
    tmp.write_text(json.dumps(_monitor_state(monitor)))
    os.replace(tmp, side)
    write_snapshot(path, state_to_snapshot(state, dt, easy, scenario_hash, FLAG_CHECKPOINT))


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([float(v) if isinstance(v, (float, np.floating)) else v for v in r])
    return path


def dispersion_study(sc, out_dir=None):
    """Measured vs continuum rates for the configured Fourier modes."""
    from .shell import ShellParams, measure_dispersion

    s, d = sc["shell"], sc["dispersion"]
    p = ShellParams(rho=float(s["rho"]), gamma=float(s["gamma"]), alpha=float(s["alpha_el"]))
    rows = []
    for mode in d["modes"]:
        r = measure_dispersion(p, int(d["n"]), tuple(int(m) for m in mode), dt=float(d["dt"]))
        m = r.measured[np.argsort(r.measured.imag)]
        e = r.exact[np.argsort(r.exact.imag)]
        for mi, ei in zip(m, e):
            rows.append([int(mode[0]), int(mode[1]), ei.real, ei.imag, mi.real, mi.imag,
                         abs(mi - ei) / abs(ei)])
    out = Path(out_dir) if out_dir else output_dir(sc)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "dispersion.csv", ["k1", "k2", "exact_re", "exact_im", "measured_re",
                                        "measured_im", "rel_error"], rows)
    return rows


def fitted_order(h, err):
    """Least-squares slope of log(err) against log(h)."""
    return float(np.polyfit(np.log(h), np.log(err), 1)[0])


def refinement_study(sc, levels=3, out_dir=None):
    """Manufactured steady Stokes on grids base * k, k = 1..levels."""
    from .fluid import solve_manufactured_stokes

    if levels < 2:
        raise CompatibilityError("refine needs at least two levels")
    base = int(sc["refine"]["base"])
    mu = float(sc["fluid"]["mu"])
    results = [solve_manufactured_stokes(base * k, mu=mu) for k in range(1, levels + 1)]
    h = np.array([1.0 / r.n for r in results])
    ve = np.array([r.velocity_error for r in results])
    pe = np.array([r.pressure_error for r in results])
    summary = {"velocity_order": fitted_order(h, ve), "pressure_order": fitted_order(h, pe)}
    out = Path(out_dir) if out_dir else output_dir(sc)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "refine.csv", ["n", "h", "velocity_error", "pressure_error"],
               [[r.n, 1.0 / r.n, r.velocity_error, r.pressure_error] for r in results])
    (out / "refine_summary.json").write_text(json.dumps(summary, indent=2))
    return results, summary


def perturbed_scenario(sc, eps):
    """Scenario whose initial datum (eta0 or eta_star) is shifted by eps * shape."""
    pert = sc["perturbation"]
    target = pert["target"]
    if target not in ("eta0", "eta_star"):
        raise CompatibilityError(f"perturbation.target must be eta0 or eta_star, got {target!r}")
    shape = _build(SHELL_FAMILIES, pert["shape"], "perturbation.shape")
    base = sc.shell_array(target)
    n = sc.n
    from .geometry import DisplacementField

    y = DisplacementField.zeros(n).positions()
    bump = np.asarray(shape(y), float) * np.ones((n, n))
    bump -= bump.mean()
    new = Scenario(copy.deepcopy(sc.data), sc.source, sc.base_dir)
    new._override = dict(getattr(sc, "_override", {}))
    new._override[target] = base + eps * bump
    return new


_plain_shell_array = Scenario.shell_array


def _shell_array_with_override(self, key):
    ov = getattr(self, "_override", {})
    if key in ov:
        return ov[key].copy()
    return _plain_shell_array(self, key)


Scenario.shell_array = _shell_array_with_override


def _fixed_dt_run(sc, t_end, dt):
    from .stepper import run

    problem = build_problem(sc)
    state = initial_state(sc, problem)
    cfg = fixed_point_config(sc.with_changes(time={"adaptive": False}))
    res = run(problem, state, t_end, dt, cfg)
    if res.status != "ok":
        raise res.error
    return problem, res


@dataclass
class PerturbPairResult:
    eps: list
    series: dict
    summary: list


def perturb_pair(sc, eps_list, out_dir=None, t_end=None, dt=None):
    """Reference run plus one perturbed run per eps, compared on a common time grid.

    The distance is the square root of the accumulated weak-strong left
    side, so it scales linearly with eps for smooth solutions.
    """
    from .diagnostics import weak_strong_distance

    if not eps_list:
        raise CompatibilityError("perturb-pair needs at least one --eps value")
    t_end = float(sc["time"]["t_end"]) if t_end is None else float(t_end)
    dt = float(sc["time"]["dt0"]) if dt is None else float(dt)
    out = Path(out_dir) if out_dir else output_dir(sc, "perturb_pair")
    out.mkdir(parents=True, exist_ok=True)
    problem, ref = _fixed_dt_run(sc, t_end, dt)
    series = {}
    for eps in eps_list:
        _, res = _fixed_dt_run(perturbed_scenario(sc, eps), t_end, dt)
        ws = weak_strong_distance(problem, res.states, ref.states)
        series[eps] = ws
        _write_csv(out / f"distance_eps_{eps:.6g}.csv",
                   ["t", "v_diff_sq", "dt_eta_diff_sq", "lap_eta_diff_sq", "grad_v_diff_sq",
                    "dt_grad_eta_diff_sq", "lhs", "rhs", "distance"],
                   zip(ws.t, ws.v_diff_sq, ws.dt_eta_diff_sq, ws.lap_eta_diff_sq, ws.grad_v_diff_sq,
                       ws.dt_grad_eta_diff_sq, ws.lhs, ws.rhs, ws.distance))
    summary = []
    order = sorted(eps_list, reverse=True)
    for i, eps in enumerate(order):
        dmax = float(series[eps].distance.max())
        row = {"eps": eps, "max_distance": dmax, "final_distance": float(series[eps].distance[-1]),
               "ratio_to_next": None, "expected_ratio": None}
        if i + 1 < len(order) and order[i + 1] > 0:
            nxt = float(series[order[i + 1]].distance.max())
            row["ratio_to_next"] = dmax / nxt if nxt > 0 else math.inf
            row["expected_ratio"] = eps / order[i + 1]
        summary.append(row)
    _write_csv(out / "summary.csv", list(summary[0]),
               [[("" if v is None else v) for v in r.values()] for r in summary])
    return PerturbPairResult(list(eps_list), series, summary)


def diagnose(traj_dir, threshold=1e-3, slack=1e-6):
    """Audit a run directory; returns (summary dict, exit code)."""
    d = Path(traj_dir)
    csv_path = d / "diagnostics.csv"
    if not csv_path.is_file():
        raise ParseError(f"{str(csv_path)!r} not found")
    with open(csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ParseError(f"{csv_path}: no data rows")
    col = lambda k: np.array([float(r[k]) for r in rows])  # noqa: E731
    E = col("energy")
    diss = col("shell_dissipation_cum") + col("fluid_dissipation_cum")
    work = col("work_cum")
    excess = E[1:] + np.diff(diss) - np.diff(work) - E[:-1] * (1 + slack)
    snaps = sorted(d.glob("*.bin"))
    for p in snaps:
        read_snapshot(p)
    last = rows[-1]
    summary = {
        "steps": int(last["step"]), "t_final": float(last["t"]),
        "energy_max_step_excess": float(excess.max()) if excess.size else 0.0,
        "energy_inequality_holds": bool(excess.size == 0 or excess.max() <= 0.0),
        "serrin_C1": float(last["serrin_C1"]), "serrin_finite": bool(np.isfinite(float(last["serrin_C1"]))),
        "accel_ratio_max": float(np.nanmax(col("accel_ratio")[1:])) if len(rows) > 1 else float("nan"),
        "min_normal_dot": float(col("min_normal_dot").min()),
        "min_height_margin": float(col("height_margin").min()),
        "max_iterations": int(col("iterations").max()), "snapshots_checked": len(snaps),
    }
    degenerate = (d / "margins.json").is_file() or (
        summary["min_normal_dot"] <= threshold or summary["min_height_margin"] <= threshold)
    summary["degenerate"] = bool(degenerate)
    (d / "diagnose.json").write_text(json.dumps(summary, indent=2))
    return summary, EXIT_DEGENERATE if degenerate else EXIT_OK


# -- command line -------------------------------------------------------------------------------
class _Parser(argparse.ArgumentParser):
    """Usage errors become ParseError (exit code 4, not argparse's 2)."""

    def error(self, message):
        raise ParseError(f"{self.prog}: {message}")


def build_parser():
    p = _Parser(prog="shellfsi", description="Fluid-shell interaction experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="progress log on stderr")
    sub = p.add_subparsers(dest="verb", required=True)
    r = sub.add_parser("run", help="single coupled run")
    r.add_argument("scenario")
    r.add_argument("--restart", help="checkpoint file to resume from")
    r.add_argument("--max-steps", type=int, default=None)
    sub.add_parser("dispersion", help="shell dispersion table").add_argument("scenario")
    f = sub.add_parser("refine", help="manufactured Stokes refinement study")
    f.add_argument("scenario")
    f.add_argument("--levels", type=int, default=3)
    q = sub.add_parser("perturb-pair", help="weak-strong perturbation study")
    q.add_argument("scenario")
    q.add_argument("--eps", type=float, action="append", required=True)
    g = sub.add_parser("diagnose", help="audit a run directory")
    g.add_argument("trajectory_dir")
    return p


def _dispatch(args):
    if args.verb == "diagnose":
        summary, code = diagnose(args.trajectory_dir)
        print(json.dumps(summary, indent=2))
        return code
    sc = load_scenario(args.scenario)
    if args.verb == "run":
        o = run_scenario(sc, restart=args.restart, max_steps=args.max_steps)
        print(f"status: {o.status}  steps: {o.result.final.step}  t: {o.result.final.t:.6g}  "
              f"output: {o.out_dir}")
        if o.status != "ok":
            print(f"reason: {o.error}", file=sys.stderr)
            if o.margins:
                print("margins: " + json.dumps(o.margins), file=sys.stderr)
        return o.exit_code
    if args.verb == "dispersion":
        for row in dispersion_study(sc):
            print("k=({}, {})  exact {:.6g}{:+.6g}i  measured {:.6g}{:+.6g}i  rel.err {:.3e}".format(*row))
        return EXIT_OK
    if args.verb == "refine":
        results, summary = refinement_study(sc, levels=args.levels)
        for r in results:
            print(f"n={r.n:4d}  velocity L2 {r.velocity_error:.4e}  pressure L2 {r.pressure_error:.4e}")
        print(f"fitted order: velocity {summary['velocity_order']:.3f}  "
              f"pressure {summary['pressure_order']:.3f}")
        return EXIT_OK
    res = perturb_pair(sc, args.eps)
    for row in res.summary:
        print(json.dumps(row))
    return EXIT_OK


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except ParseError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (ParseError, CompatibilityError, FormatError, InvalidPair) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DegenerateGeometry, MarginExceeded) as exc:
        print(f"degenerate geometry: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (SolveFailure, NoContraction, DtUnderflow) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ShellFSIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


# -- named scenarios ------------------------------------------------------------------------------
_SHELL_DATA = {"eta0": {"name": "sine", "amplitude": 0.02, "k1": 1},
               "eta_star": {"name": "cosine", "amplitude": 0.1, "k2": 1}}

PRESETS = {
    # swirl-driven flow at moderate Reynolds number; contracts at dt = 1e-3, not at dt = 10
    "reference": {
        "geometry": {"n_shell": 32, "n_fluid": 32},
        "shell": dict(_SHELL_DATA),
        "fluid": {"mu": 0.05},
        "forcing": {"f": {"name": "swirl", "amplitude": 20.0},
                    "g": {"name": "standing", "amplitude": 2.0, "omega": 6.0}},
        "time": {"t_end": 0.1, "dt0": 1e-3, "adaptive": False},
        "output": {"dir": "reference"},
    },
    "free_decay": {
        "geometry": {"n_shell": 16, "n_fluid": 16},
        "shell": dict(_SHELL_DATA),
        "time": {"t_end": 0.05, "dt0": 1e-3, "adaptive": False},
        "output": {"dir": "free_decay"},
    },
    "smooth": {
        "geometry": {"n_shell": 16, "n_fluid": 16},
        "shell": dict(_SHELL_DATA),
        "forcing": {"f": {"name": "shear", "amplitude": 5.0, "omega": 10.0},
                    "g": {"name": "standing", "amplitude": 2.0, "omega": 6.0}},
        "time": {"t_end": 0.1, "dt0": 1e-2, "adaptive": False},
        "output": {"dir": "smooth"},
    },
    "perturb": {
        "geometry": {"n_shell": 16, "n_fluid": 16},
        "shell": dict(_SHELL_DATA),
        "forcing": {"g": {"name": "standing", "amplitude": 2.0, "omega": 6.0}},
        "time": {"t_end": 0.1, "dt0": 2e-3, "adaptive": False},
        "perturbation": {"target": "eta0", "shape": {"name": "cosine", "amplitude": 1.0, "k1": 2}},
        "output": {"dir": "perturb"},
    },
    "collapse": {
        "geometry": {"n_shell": 16, "n_fluid": 16},
        "forcing": {"g": {"name": "pull", "amplitude": 20000.0, "k1": 1}},
        "time": {"t_end": 1.0, "dt0": 2e-3},
        "output": {"dir": "collapse"},
    },
}


def preset(name, **changes):
    """Validated Scenario for a named preset; ``changes`` update sections."""
    if name not in PRESETS:
        raise ParseError(f"unknown preset {name!r} (known: {', '.join(sorted(PRESETS))})")
    sc = scenario_from_dict(copy.deepcopy(PRESETS[name]))
    return validate(sc.with_changes(**changes)) if changes else sc


def write_preset_files(directory):
    """Write every preset as a YAML scenario file; returns the paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, data in PRESETS.items():
        p = d / f"{name}.yaml"
        p.write_text(yaml.safe_dump(data, sort_keys=False))
        paths.append(p)
    return paths
