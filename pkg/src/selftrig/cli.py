"""Command-line front end: ``selftrig <command> --scenario ...``.

Exit codes: 0 success, 2 infeasible certificate or failed verification,
3 I/O error, 4 invalid input.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from .certificates import certificate_from_dict, certificate_to_dict
from .errors import DivergenceError, InfeasibleError, SelfTrigError
from .scenario import builtin_names, load_scenario, prepare, verify_certificate
from .sim import (
    motivational_report,
    read_trace_csv,
    run,
    verify_trace,
    write_dense_csv,
    write_trace_csv,
)
from .trigger import RegionPolicy, worker_count

EXIT_OK, EXIT_INFEASIBLE, EXIT_IO, EXIT_INVALID = 0, 2, 3, 4


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, default=_json_default) + "\n")


def _out_dir(args, sc=None):
    out = args.out or (sc.block("output").get("dir") if sc else None) or "out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _scenario(args):
    sc = load_scenario(args.scenario)
    overrides = {}
    if getattr(args, "varpi", None) is not None:
        overrides["mechanism.varpi"] = args.varpi
    if getattr(args, "beta", None) is not None:
        overrides["mechanism.beta"] = args.beta
    return sc.with_overrides(overrides) if overrides else sc


def _prepare(args, sc, **kw):
    return prepare(sc, mu_variant=args.mu_variant, seed=args.seed, **kw)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

GNUPLOT_ANALYZE = """set datafile separator ','
set key autotitle columnhead
set xlabel 'T [s]'
set ylabel 'spectral radius'
set grid
plot '{sweep}' using 1:2 with lines, 1 with lines dashtype 2 title 'unit circle'
pause -1
"""

GNUPLOT_TRACE = """set datafile separator ','
set key autotitle columnhead
set multiplot layout 3,1
set ylabel 'state'
plot {states}
set ylabel 'V(x)'
set logscale y
plot '{trace}' using 1:{vcol} with linespoints
unset logscale y
set ylabel 'interval [s]'
set xlabel 't [s]'
plot '{trace}' every ::1 using 1:{icol} with steps
unset multiplot
pause -1
"""


def cmd_analyze(args):
    sc = load_scenario(args.scenario)
    a = sc.block("analysis")
    grid = a.get("T_grid", {"start": 0.01, "stop": 5.0, "num": 500})
    T_list = np.linspace(float(grid["start"]), float(grid["stop"]), int(grid["num"]))
    from .scenario import build_plant

    report = motivational_report(build_plant(sc), T_list, a.get("pairs", []))
    out = _out_dir(args, sc)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["T", "spectral_radius"])
        w.writerows((repr(T), repr(r)) for T, r in report["sweep"])
    with open(out / "cases.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["T1", "T2", "rho_T1", "rho_T2", "rho_product",
                    "T1_stable", "T2_stable", "product_stable"])
        for c in report["cases"]:
            w.writerow(c["pair"] + [c["rho_first"], c["rho_second"], c["rho_product"],
                                    c["first_stable"], c["second_stable"], c["product_stable"]])
    (out / "analyze.gp").write_text(GNUPLOT_ANALYZE.format(sweep="sweep.csv"))
    print(f"{'T1':>7} {'T2':>7} {'rho(T1)':>9} {'rho(T2)':>9} {'rho(T2*T1)':>11}  verdicts")
    for c in report["cases"]:
        verdict = "/".join("stable" if c[k] else "unstable"
                           for k in ("first_stable", "second_stable", "product_stable"))
        print(f"{c['pair'][0]:7.3f} {c['pair'][1]:7.3f} {c['rho_first']:9.4f} "
              f"{c['rho_second']:9.4f} {c['rho_product']:11.4f}  {verdict}")
    print(f"largest stabilizing constant period on the grid: {report['largest_stable_period']}")
    print(f"wrote {out / 'sweep.csv'}, {out / 'cases.csv'}, {out / 'analyze.gp'}")
    return EXIT_OK


def cmd_certify(args):
    sc = _scenario(args)
    out = _out_dir(args, sc)
    try:
        setup = _prepare(args, sc, build_policy=False)
    except InfeasibleError as exc:
        print(f"FAIL: {exc}")
        for k, v in exc.details.items():
            print(f"  {k}: {v}")
        if "max_certified_varpi" in exc.details:
            print(f"largest varpi for which the certificate passes: "
                  f"{exc.details['max_certified_varpi']:.6g}")
        return EXIT_INFEASIBLE
    ok, margins = verify_certificate(setup)
    print(f"certificate ({setup.cert.kind}) sigma*={setup.cert.sigma_star}")
    for k, v in {**setup.notes, **margins}.items():
        print(f"  {k}: {v}")
    write_json(out / "certificate.json", certificate_to_dict(setup.cert))
    print(("PASS" if ok else "FAIL") + f"; wrote {out / 'certificate.json'}")
    return EXIT_OK if ok else EXIT_INFEASIBLE


def cmd_partition(args):
    sc = _scenario(args)
    if not sc.offline:
        print(f"scenario mode {sc.mode!r} has no offline table", file=sys.stderr)
        return EXIT_INVALID
    out = _out_dir(args, sc)
    setup = _prepare(args, sc, threads=worker_count())
    path = Path(args.policy) if args.policy else out / "policy.json"
    write_json(path, setup.policy.to_dict())
    write_json(out / "certificate.json", certificate_to_dict(setup.cert))
    avgs = [e.average for e in setup.policy.entries]
    print(f"{len(setup.policy.entries)} regions; stored average interval "
          f"min {min(avgs):.4f} max {max(avgs):.4f}; wrote {path}")
    return EXIT_OK


def _trace_plot(n, trace="trace.csv", dense="dense.csv"):
    states = ", ".join(f"'{dense}' using 1:{i + 2} with lines" for i in range(n))
    return GNUPLOT_TRACE.format(states=states, trace=trace, vcol=n + 2, icol=n + 5)


def cmd_simulate(args):
    sc = _scenario(args)
    out = _out_dir(args, sc)
    policy = None
    if sc.offline:
        path = Path(args.policy) if args.policy else out / "policy.json"
        if path.exists():
            policy = RegionPolicy.from_dict(json.loads(path.read_text()))
        elif not args.build_policy:
            print(f"offline mode needs a region table: {path} not found. Run "
                  f"`selftrig partition --scenario {args.scenario}` first or pass --build-policy.",
                  file=sys.stderr)
            return EXIT_INVALID
    setup = _prepare(args, sc, policy=policy, threads=worker_count())
    if args.t_end is not None:
        sc = sc.with_overrides({"sim.t_end": args.t_end})
    trace = run(sc, setup=setup, substep=args.substep)
    report = verify_trace(trace, setup.cert)
    write_trace_csv(trace, out / "trace.csv")
    write_dense_csv(trace, out / "dense.csv")
    write_json(out / "certificate.json", certificate_to_dict(setup.cert))
    (out / "plot.gp").write_text(_trace_plot(setup.plant.n))
    summary = trace.summary()
    summary.update(scenario=sc.name, sigma_star=list(setup.cert.sigma_star),
                   reported_average=sc.block("reported").get("average"),
                   violations=len(report.violations), check=report.kind,
                   notes=setup.notes)
    write_json(out / "summary.json", summary)
    print(f"{sc.name}: average interval {trace.average_interval:.4f} s, "
          f"average horizon duration {trace.average_horizon_duration:.4f} s, "
          f"{len(trace.horizons)} decisions, {len(report.violations)} {report.kind} violations")
    print(f"wrote {out}/trace.csv, dense.csv, summary.json, certificate.json, plot.gp")
    return EXIT_OK if report.passed else EXIT_INFEASIBLE


def cmd_verify(args):
    cert_path = Path(args.certificate) if args.certificate else Path(args.out or "out") / "certificate.json"
    trace_path = Path(args.trace) if args.trace else Path(args.out or "out") / "trace.csv"
    cert = certificate_from_dict(json.loads(cert_path.read_text()))
    mode = "unperturbed" if cert.kind == "unperturbed" else "perturbed"
    trace = read_trace_csv(trace_path, mode=mode, P=cert.P)
    report = verify_trace(trace, cert, mode)
    if args.out:
        write_json(_out_dir(args) / "verify.json", report.to_dict())
    print(f"{report.kind}: {len(report.steps)} checks, {len(report.violations)} violations")
    for v in report.violations[:10]:
        print(f"  violation: {v}")
    return EXIT_OK if report.passed else EXIT_INFEASIBLE


def _sweep_one(job):
    source, overrides, mu_variant, seed = job
    sc = load_scenario(source)
    if overrides:
        sc = sc.with_overrides(overrides)
    row = {"scenario": sc.name, **{k: v for k, v in overrides.items()}}
    try:
        setup = prepare(sc, mu_variant=mu_variant, seed=seed)
        trace = run(sc, setup=setup, dense=False)
    except (InfeasibleError, DivergenceError) as exc:
        row.update(status="failed", error=str(exc))
        return row
    report = verify_trace(trace, setup.cert)
    row.update(status="ok", average_interval=trace.average_interval,
               average_horizon_duration=trace.average_horizon_duration,
               decisions=len(trace.horizons), violations=len(report.violations),
               reported=sc.block("reported").get("average"))
    return row


def _parse_vary(spec):
    key, _, values = spec.partition("=")
    if not values:
        raise ValueError(f"--vary expects KEY=V1,V2,..., got {spec!r}")
    return key, [yaml.safe_load(v) for v in values.split(",")]


def cmd_sweep(args):
    sources = args.scenario or [n for n in builtin_names() if n != "motivational"]
    grids = [{}]
    for spec in args.vary or []:
        key, values = _parse_vary(spec)
        grids = [{**g, key: v} for g in grids for v in values]
    jobs = [(s, g, args.mu_variant, args.seed) for s in sources for g in grids]
    workers = worker_count()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(j) for j in jobs]
    out = _out_dir(args)
    keys = []
    for r in rows:
        keys.extend(k for k in r if k not in keys)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        avg = r.get("average_interval", math.nan)
        print(f"{r['scenario']:<28} {r['status']:<7} average {avg:.4f}  "
              f"reported {r.get('reported')}  violations {r.get('violations')}")
    print(f"wrote {out / 'sweep.csv'}")
    bad = any(r["status"] != "ok" or r.get("violations") for r in rows)
    return EXIT_INFEASIBLE if bad else EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="selftrig", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scenario=True):
        if scenario:
            p.add_argument("--scenario", required=True,
                           help=f"scenario file or built-in name ({', '.join(builtin_names())})")
        p.add_argument("--out", help="output directory (default: the scenario's output.dir)")
        p.add_argument("--seed", type=int, help="seed for seeded-random tie-breaking")
        p.add_argument("--substep", type=float, help="RK4 substep for perturbed runs [s]")
        p.add_argument("--mu-variant", choices=["published", "corrected"],
                       help="ultimate-bound formula")
        return p

    common(sub.add_parser("analyze", help="spectral radius sweep and interval-pair cases"))
    p = common(sub.add_parser("certify", help="build or verify the stability certificate"))
    p.add_argument("--varpi", help="override the disturbance bound: number, derived or certified")
    p.add_argument("--beta", type=float, help="override the decay parameter")
    p = common(sub.add_parser("partition", help="precompute the offline region table"))
    p.add_argument("--policy", help="policy JSON path (default OUT/policy.json)")
    p = common(sub.add_parser("simulate", help="closed-loop simulation"))
    p.add_argument("--policy", help="policy JSON for offline modes (default OUT/policy.json)")
    p.add_argument("--build-policy", action="store_true",
                   help="compute the offline table if no policy file exists")
    p.add_argument("--t-end", type=float, help="override the final time")
    p = common(sub.add_parser("verify", help="check a trace against a certificate"), scenario=False)
    p.add_argument("--trace", help="trace CSV (default OUT/trace.csv)")
    p.add_argument("--certificate", help="certificate JSON (default OUT/certificate.json)")
    p = common(sub.add_parser("sweep", help="run several scenarios and tabulate averages"),
               scenario=False)
    p.add_argument("--scenario", action="append",
                   help="scenario file or built-in name (repeatable; default: all built-ins)")
    p.add_argument("--vary", action="append", help="KEY=V1,V2,... dotted scenario key grid")
    return parser


COMMANDS = {"analyze": cmd_analyze, "certify": cmd_certify, "partition": cmd_partition,
            "simulate": cmd_simulate, "verify": cmd_verify, "sweep": cmd_sweep}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SelfTrigError, ValueError, KeyError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
