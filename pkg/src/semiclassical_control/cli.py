"""Command-line entry point ``scl``.

Exit status: 0 on success, 1 when a verification check fails, 2 on
configuration errors.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import Scenario, bundled_scenario_path, load_scenario
from .errors import ConfigError, SCLError
from .harness import AXES, convergence_study, dump_json, output_root, rows_to_csv, rows_to_jsonl, run_scenario
from .spectral import PeriodicField, field_to_csv, l2_norm_array


def _scenario(args) -> Scenario:
    if args.config is None:
        raise ConfigError("--config is required (a path or a bundled scenario name)")
    p = Path(args.config)
    if not p.exists() and not p.suffix:
        p = bundled_scenario_path(args.config)
    sc = load_scenario(p)
    if args.seed is not None:
        sc = sc.with_values(seeds__seed=args.seed)
    return sc


def _write(out: Path, rel: str, text: str) -> Path:
    p = out / rel
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(text)
    return p


def cmd_synthesize(args) -> int:
    rec = run_scenario(_scenario(args), out=args.out)
    for name, c in rec.checks.items():
        status = "PASS" if c["passed"] else "FAIL"
        print(f"[{status}] {name}: {c['value']:.4g} {c['relation']} {c['threshold']:.4g}")
    print(f"run directory: {rec.run_dir}")
    return 0 if rec.passed else 1


def _stage_controls(sc: Scenario, spec):
    from .synthesis import stageN_controls

    return stageN_controls(spec, sc["synthesis.N"], sc["numerics.delta"], n_steps=sc["numerics.n_steps"])


def cmd_simulate_limit(args) -> int:
    sc = _scenario(args)
    spec = sc.target_spec()
    st = _stage_controls(sc, spec)
    tr = st.trajectory
    out = output_root(args.out) / f"{sc.name}-{sc.content_hash()}" / "limit"
    _write(out, "trajectory_log.jsonl", tr.log_jsonl())
    for name, text in tr.field_csvs(every=max(1, len(tr.t_nodes) // 10)).items():
        _write(out, f"{name}.csv", text)
    print(f"stage-{sc['synthesis.N']} terminal error: {st.terminal_error:.6g} (eps {spec.eps:.3g})")
    print(f"min rho0 over run: {float(np.min(tr.min_rho0)):.6g}")
    print(f"output: {out}")
    return 0 if st.terminal_error <= spec.eps else 1


def cmd_simulate_nls(args) -> int:
    from .semiclassical import grenier_from_wkb_initial, potential_from_eta, semiclassical_initial_data, solve_grenier, solve_nls

    sc = _scenario(args)
    spec = sc.target_spec()
    hbar = sc["semiclassical.hbar"] if args.hbar is None else args.hbar
    dt = sc["semiclassical.dt"]
    every = sc["semiclassical.store_every"]
    eta = _stage_controls(sc, spec).eta
    a00, a10, S = semiclassical_initial_data(spec)
    w0 = grenier_from_wkb_initial(a00, a10, S, hbar)
    nt = solve_nls(w0.to_wave(hbar), potential_from_eta(eta, hbar, spec.grid), spec.T, dt=dt, store_every=every)
    gt = solve_grenier(w0, eta, hbar, spec.T, dt=dt, store_every=every)
    g = spec.grid
    gap = max(float(l2_norm_array(np.abs(gt.wave(i).psi.values - nt.wave(i).psi.values), g))
              for i in range(len(nt.t_nodes)))
    drift = float(np.max(np.abs(nt.mass - nt.mass[0])) / nt.mass[0])
    rho = np.abs(nt.terminal.psi.values) ** 2
    out = output_root(args.out) / f"{sc.name}-{sc.content_hash()}" / "nls"
    _write(out, "rho_T.csv", field_to_csv(PeriodicField(g, rho)))
    summary = {"hbar": hbar, "dt": dt, "grenier_nls_gap": gap, "mass_drift": drift,
               "rho_gap_L2": float(l2_norm_array(rho - spec.ghat0.values - hbar * spec.ghat1.values, g))}
    _write(out, "summary.json", dump_json(summary))
    for k, v in summary.items():
        print(f"{k}: {v:.6g}")
    print(f"output: {out}")
    return 0 if drift <= 1e-10 and gap <= 1e-6 else 1


def cmd_verify_identities(args) -> int:
    from .spectral import PeriodicGrid
    from .trig_algebra import TrigPolynomial, basis_elements, decompose_mode, decompose_pair

    g = PeriodicGrid(256)
    records = []
    for n in range(args.max_n + 1):
        for j, kind, e in basis_elements(n + 2):
            for sign in (1, -1):
                psi = e * float(sign)
                zero = TrigPolynomial.zero(n + 2)
                d = decompose_mode(psi, n)
                p0 = decompose_pair((psi, zero), n)
                p1 = decompose_pair((zero, psi), n)
                records.append({"n": n, "mode": j, "kind": "sin" if kind == 0 else "cos", "sign": sign,
                                "bracket_residual": d.residual(psi, g),
                                "paired_residual": max(*p0.residuals((psi, zero), g), *p1.residuals((zero, psi), g)),
                                "factors": len(d.factors)})
    worst = max(max(r["bracket_residual"], r["paired_residual"]) for r in records)
    if args.format == "jsonl":
        sys.stdout.write(rows_to_jsonl(records))
    else:
        print(f"{'n':>2} {'mode':>4} {'kind':>4} {'sign':>4} {'bracket':>10} {'paired':>10} {'factors':>7}")
        for r in records:
            print(f"{r['n']:>2} {r['mode']:>4} {r['kind']:>4} {r['sign']:>4} {r['bracket_residual']:>10.2e} "
                  f"{r['paired_residual']:>10.2e} {r['factors']:>7}")
        print(f"max residual {worst:.3e} (threshold 1e-12)")
    return 0 if worst <= 1e-12 else 1


def _parse_sweep(text: str | None):
    if text is None:
        return None
    return [float(v) for v in text.split(",") if v.strip()]


def cmd_convergence(args) -> int:
    sc = _scenario(args)
    values = _parse_sweep(args.sweep) or list(sc[f"sweeps.{args.axis}"])
    if args.axis in ("N", "osc", "grid"):
        values = [int(v) for v in values]
    table = convergence_study(args.axis, values, sc, metric=args.metric, jobs=args.jobs)
    out = output_root(args.out) / f"{sc.name}-{sc.content_hash()}" / "convergence"
    _write(out, f"{args.axis}.csv", table.to_csv())
    _write(out, f"{args.axis}.jsonl", table.to_jsonl())
    if args.format == "jsonl":
        sys.stdout.write(table.to_jsonl())
    else:
        sys.stdout.write(rows_to_csv(["value", table.metric], [[r["value"], r[table.metric]] for r in table.rows]))
        if table.slope is not None:
            print(f"log-log slope: {table.slope:.4f}")
    return 0


def cmd_run_acceptance(args) -> int:
    from .acceptance import format_line, run_acceptance

    ids = [int(v) for v in args.only.split(",")] if args.only else None
    results = run_acceptance(ids, on_result=lambda r: print(format_line(r), flush=True))
    out = output_root(args.out)
    _write(out, "acceptance.json", dump_json([r.to_dict() for r in results]))
    passed = sum(r.passed for r in results)
    print(f"{passed}/{len(results)} criteria passed")
    return 0 if passed == len(results) else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="scenario file, or the name of a bundled scenario")
    common.add_argument("--out", help="output root (default $SCL_OUT_DIR or ./runs)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps")
    common.add_argument("--seed", type=int, default=None, help="override seeds.seed")

    parser = argparse.ArgumentParser(prog="scl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synthesize", parents=[common], help="synthesize E_0 controls for a scenario and verify them")
    sub.add_parser("simulate-limit", parents=[common], help="run the limit system under the stage-N controls")
    p = sub.add_parser("simulate-nls", parents=[common], help="split-step NLS and Grenier runs under the stage-N controls")
    p.add_argument("--hbar", type=float, default=None)
    p = sub.add_parser("verify-identities", parents=[common], help="residuals of the trigonometric decompositions")
    p.add_argument("--max-n", type=int, default=6)
    p.add_argument("--format", choices=("table", "jsonl"), default="table")
    p = sub.add_parser("convergence", parents=[common], help="convergence table along one axis")
    p.add_argument("--axis", choices=AXES, required=True)
    p.add_argument("--sweep", help="comma-separated axis values (default: the scenario's sweeps.<axis>)")
    p.add_argument("--metric", default=None)
    p.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    p = sub.add_parser("run-acceptance", parents=[common], help="run the acceptance criteria")
    p.add_argument("--only", help="comma-separated criterion ids")
    return parser


COMMANDS = {
    "synthesize": cmd_synthesize,
    "simulate-limit": cmd_simulate_limit,
    "simulate-nls": cmd_simulate_nls,
    "verify-identities": cmd_verify_identities,
    "convergence": cmd_convergence,
    "run-acceptance": cmd_run_acceptance,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except SCLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
