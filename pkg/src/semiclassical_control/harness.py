"""Scenario runs, convergence studies and their on-disk artifacts."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Scenario, load_scenario
from .curves import ConstantCurve
from .errors import ConfigError, SCLError
from .limit_system import COMPONENTS, SolverConfig, solve_R
from .semiclassical import hbar_sweep, semiclassical_initial_data, solve_grenier, solve_nls, potential_from_eta
from .spectral import PeriodicField, PeriodicGrid, field_to_csv, l2_norm_array, sobolev_norm_array
from .synthesis import full_pipeline, oscillation_insensitivity, stageN_controls
from .trig_algebra import OscillatorSchedule, decompose_pair_coeffs, relaxation_metric

__all__ = [
    "RunRecord",
    "ConvergenceTable",
    "run_scenario",
    "convergence_study",
    "output_root",
    "loglog_slope",
    "rows_to_csv",
    "rows_to_jsonl",
    "dump_json",
]

AXES = ("N", "osc", "hbar", "dt", "grid")


def output_root(out: str | Path | None = None) -> Path:
    """Explicit ``out`` wins, then $SCL_OUT_DIR, then ./runs."""
    if out is not None:
        return Path(out)
    return Path(os.environ.get("SCL_OUT_DIR", "runs"))


def loglog_slope(xs, ys) -> float | None:
    """Least-squares slope of log y against log x (None if fewer than two positive points)."""
    pts = [(math.log(x), math.log(y)) for x, y in zip(xs, ys) if x > 0 and y is not None and y > 0]
    if len(pts) < 2:
        return None
    a = np.array(pts)
    return float(np.polyfit(a[:, 0], a[:, 1], 1)[0])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def rows_to_csv(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def rows_to_jsonl(records: list[dict]) -> str:
    return "".join(json.dumps(_plain(r), sort_keys=True) + "\n" for r in records)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    return obj


def dump_json(obj) -> str:
    return json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# Scenario runs


@dataclass
class RunRecord:
    name: str
    config_hash: str
    run_dir: Path
    manifest: dict[str, str] = field(default_factory=dict)
    checks: dict[str, dict] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.checks.values())

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "config_hash": self.config_hash,
            "manifest": self.manifest,
            "checks": self.checks,
            "passed": self.passed,
        }


def _check(value, threshold, passed=None, relation="<=") -> dict:
    value = None if value is None else float(value)
    if passed is None:
        passed = value is not None and np.isfinite(value) and value <= threshold
    return {"value": value, "threshold": float(threshold), "relation": relation, "passed": bool(passed)}


def _mass_drift(tr, comp: str) -> float:
    idx = COMPONENTS.index(comp)
    dx = tr.grid.dx
    masses = np.sum(tr.states[:, idx], axis=-1) * dx
    return float(np.max(np.abs(masses - masses[0])) / max(abs(masses[0]), 1.0))


class _Writer:
    def __init__(self, root: Path):
        self.root = root
        self.manifest: dict[str, str] = {}

    def write(self, rel: str, text: str) -> None:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        data = text.encode()
        p.write_bytes(data)
        self.manifest[rel] = hashlib.sha256(data).hexdigest()


def run_scenario(source: str | Path | Scenario, out: str | Path | None = None) -> RunRecord:
    """Synthesize controls for a scenario, verify them and write the run directory.

    Layout: <out>/<name>-<hash>/ with scenario.cfg, fields/, controls/,
    report.json and acceptance.json. Solver errors are re-raised with the
    scenario name attached.
    """
    scenario = source if isinstance(source, Scenario) else load_scenario(source)
    spec = scenario.target_spec()
    h = scenario.content_hash()
    run_dir = output_root(out) / f"{scenario.name}-{h}"
    w = _Writer(run_dir)
    w.write("scenario.cfg", scenario.to_text())
    cfg = SolverConfig(cfl=scenario["numerics.cfl"])
    try:
        controls, report = full_pipeline(
            spec,
            scenario["synthesis.N"],
            osc_schedule=scenario["synthesis.osc_schedule"],
            smooth_schedule=scenario["synthesis.smooth_schedule"],
            delta=scenario["numerics.delta"],
            cfg=cfg,
            n_steps=scenario["numerics.n_steps"],
            max_segments=scenario["synthesis.max_segments"],
            raise_on_failure=False,
        )
    except SCLError as exc:
        raise type(exc)(f"scenario {scenario.name!r}: {exc}") from exc

    tr = controls.trajectory
    checks = {
        "terminal_error": _check(report.final_error, spec.eps),
        "mass_rho0": _check(_mass_drift(tr, "rho0"), 1e-8),
        "mass_rho1": _check(_mass_drift(tr, "rho1"), 1e-8),
        "control_in_E0": _check(controls.projection_residual(tr.t_nodes), 1e-12),
    }

    # fields: terminal state and targets
    term = tr.terminal
    for name in COMPONENTS:
        w.write(f"fields/terminal_{name}.csv", field_to_csv(getattr(term, name)))
    for name, f in spec.target.items():
        w.write(f"fields/target_{name}.csv", field_to_csv(f))
    w.write("fields/trajectory_log.jsonl", tr.log_jsonl())
    nodes = tr.t_nodes[:: max(1, len(tr.t_nodes) // 200)]
    if nodes[-1] != tr.t_nodes[-1]:
        nodes = np.append(nodes, tr.t_nodes[-1])
    header, rows = controls.coefficient_table(nodes)
    w.write("controls/eta.csv", rows_to_csv(header, rows.tolist()))

    sc_report = None
    if scenario["semiclassical.enabled"]:
        sc_report = _semiclassical_checks(scenario, spec, controls.eta, checks, w)

    report_dict = {
        "scenario": scenario.to_dict(),
        "config_hash": h,
        "synthesis": json.loads(report.to_json()),
        "semiclassical": sc_report,
    }
    w.write("report.json", dump_json(report_dict))
    record = RunRecord(scenario.name, h, run_dir, dict(w.manifest), checks)
    w.write("acceptance.json", dump_json({"checks": checks, "passed": record.passed}))
    record.manifest = dict(w.manifest)
    return record


def _semiclassical_checks(scenario: Scenario, spec, eta, checks: dict, w: _Writer) -> dict:
    hbar = scenario["semiclassical.hbar"]
    dt = scenario["semiclassical.dt"]
    every = scenario["semiclassical.store_every"]
    a00, a10, S = semiclassical_initial_data(spec)
    from .semiclassical import grenier_from_wkb_initial

    w0 = grenier_from_wkb_initial(a00, a10, S, hbar)
    gt = solve_grenier(w0, eta, hbar, spec.T, dt=dt, store_every=every)
    nt = solve_nls(w0.to_wave(hbar), potential_from_eta(eta, hbar, spec.grid), spec.T, dt=dt, store_every=every)
    grid = spec.grid
    gap = max(l2_norm_array(np.abs(gt.wave(i).psi.values - nt.wave(i).psi.values), grid) for i in range(len(nt.t_nodes)))
    drift = float(np.max(np.abs(nt.mass - nt.mass[0])) / nt.mass[0])
    checks["nls_mass"] = _check(drift, 1e-10)
    checks["grenier_vs_nls"] = _check(gap, 1e-6)
    rho = np.abs(nt.terminal.psi.values) ** 2
    w.write("fields/nls_rho_T.csv", field_to_csv(PeriodicField(grid, rho)))
    target = spec.ghat0.values + hbar * spec.ghat1.values
    return {
        "hbar": hbar,
        "dt": dt,
        "grenier_nls_gap": gap,
        "nls_mass_drift": drift,
        "rho_gap_L2": float(l2_norm_array(rho - target, grid)),
    }


# ---------------------------------------------------------------------------
# Convergence studies


@dataclass
class ConvergenceTable:
    axis: str
    metric: str
    rows: list[dict]
    slope: float | None

    @property
    def values(self) -> list:
        return [r["value"] for r in self.rows]

    @property
    def column(self) -> list[float]:
        return [r[self.metric] for r in self.rows]

    def to_csv(self) -> str:
        keys = sorted({k for r in self.rows for k in r} - {"value"})
        return rows_to_csv(["value"] + keys, [[r["value"]] + [r.get(k, "") for k in keys] for r in self.rows])

    def to_jsonl(self) -> str:
        """JSON-lines table {axis, value, metric, metric_value} plus a summary line with the slope."""
        recs = [{"axis": self.axis, "value": r["value"], "metric": m, "metric_value": r[m]}
                for r in self.rows for m in sorted(k for k in r if k != "value")]
        recs.append({"axis": self.axis, "metric": self.metric, "loglog_slope": self.slope})
        return rows_to_jsonl(recs)


_DEFAULT_METRIC = {"N": "terminal_error", "osc": "relaxation", "hbar": "s_H1", "dt": "self_difference",
                   "grid": "self_difference"}


def _point_N(scenario: Scenario, N):
    spec = scenario.target_spec()
    st = stageN_controls(spec, int(N), scenario["numerics.delta"], n_steps=scenario["numerics.n_steps"])
    return {"value": int(N), "terminal_error": st.terminal_error}


def _convergence_control(scenario: Scenario) -> np.ndarray:
    c0, c1 = scenario["convergence.control0"], scenario["convergence.control1"]
    M = max(c0.max_mode(), c1.max_mode(), 2)
    return np.stack([c0.coeffs(M), c1.coeffs(M)])


def _point_osc(scenario: Scenario, p, metric: str):
    grid = scenario.grid()
    control = _convergence_control(scenario)
    n = control.shape[1] - 2
    if metric == "relaxation":
        dec = decompose_pair_coeffs(control, n)
        sched = OscillatorSchedule.from_factors(dec.pair_coeffs(), int(p), scenario["spec.T"])
        u0 = scenario["convergence.u0"].values(grid)
        return {"value": int(p), "relaxation": relaxation_metric(u0, sched, grid, 0)}
    if metric == "insensitivity":
        spec = scenario.target_spec()
        row = oscillation_insensitivity(spec, control, n, [int(p)])[0]
        return {"value": int(p), "insensitivity": row["distance"]}
    raise ConfigError(f"unknown metric {metric!r} for axis osc")


def _point_dt(scenario: Scenario, dt):
    """NLS at the scenario hbar: difference between steps dt and dt/2 at T."""
    spec = scenario.target_spec()
    hbar = scenario["semiclassical.hbar"]
    eta = stageN_controls(spec, 0, scenario["numerics.delta"], n_steps=scenario["numerics.n_steps"], verify=False).eta
    a00, a10, S = semiclassical_initial_data(spec)
    from .semiclassical import wave_from_wkb_initial

    psi0 = wave_from_wkb_initial(a00, a10, S, hbar)
    F = potential_from_eta(eta, hbar, spec.grid)
    big = 10**9
    p1 = solve_nls(psi0, F, spec.T, dt=float(dt), store_every=big).terminal.psi.values
    p2 = solve_nls(psi0, F, spec.T, dt=float(dt) / 2, store_every=big).terminal.psi.values
    return {"value": float(dt), "self_difference": float(l2_norm_array(np.abs(p1 - p2), spec.grid))}


def _point_grid(scenario: Scenario, n_points):
    """Limit system under the constant convergence control: grid n against 2n at T."""
    out = []
    for n in (int(n_points), 2 * int(n_points)):
        sc = scenario.with_values(**{"numerics__grid": n})
        spec = sc.target_spec()
        control = ConstantCurve(_convergence_control(sc), spec.T)
        tr = solve_R(spec.system_input(eta=control), time_grid=np.linspace(0.0, spec.T, 257))
        out.append(tr.terminal.as_array())
    coarse, fine = out
    diff = fine[:, ::2] - coarse
    g = PeriodicGrid(int(n_points))
    val = math.sqrt(sum(float(sobolev_norm_array(d, g, 1)) ** 2 for d in diff))
    return {"value": int(n_points), "self_difference": val}


def _run_point(args):
    axis, scenario, value, metric = args
    if axis == "N":
        return _point_N(scenario, value)
    if axis == "osc":
        return _point_osc(scenario, value, metric)
    if axis == "dt":
        return _point_dt(scenario, value)
    if axis == "grid":
        return _point_grid(scenario, value)
    raise ConfigError(f"unknown axis {axis!r}")


def convergence_study(axis: str, values, scenario: Scenario, metric: str | None = None, jobs: int = 1) -> ConvergenceTable:
    """Measure one metric along an axis; log-log slope where the axis is a scale.

    Axes: N (stage-N construction error), osc (relaxation metric or
    oscillation insensitivity), hbar (semiclassical metrics), dt (NLS
    self-convergence), grid (limit-system self-convergence).
    """
    if axis not in AXES:
        raise ConfigError(f"unknown axis {axis!r}; expected one of {', '.join(AXES)}")
    values = list(values)
    if len(values) > 1:
        diffs = np.diff(np.asarray(values, dtype=float))
        if not (np.all(diffs > 0) or np.all(diffs < 0)):
            raise ConfigError("convergence values must be strictly monotone")
    metric = metric or _DEFAULT_METRIC[axis]
    if axis == "hbar":
        spec = scenario.target_spec()
        eta = stageN_controls(spec, 0, scenario["numerics.delta"], n_steps=scenario["numerics.n_steps"], verify=False).eta
        res = hbar_sweep(spec, eta, values, dt=scenario["semiclassical.dt"],
                         store_every=scenario["semiclassical.store_every"], jobs=jobs)
        rows = [dict(r, value=r["hbar"]) for r in res["rows"]]
    else:
        tasks = [(axis, scenario, v, metric) for v in values]
        if jobs > 1 and len(tasks) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as ex:
                rows = list(ex.map(_run_point, tasks))
        else:
            rows = [_run_point(t) for t in tasks]
    if rows and metric not in rows[0]:
        raise ConfigError(f"metric {metric!r} not produced on axis {axis!r}")
    slope = None if axis == "N" else loglog_slope([r["value"] for r in rows], [r[metric] for r in rows])
    return ConvergenceTable(axis, metric, rows, slope)
