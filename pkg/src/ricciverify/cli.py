"""Command-line entry point.

Subcommands: soliton, barrier, flow, density, lgeo and verify-all. Every run
writes CSV tables and a JSON report into ``--out`` plus a ``manifest.json``
recording the effective configuration, its hash and library versions. The
exit status is 0 exactly when every requested check passes, 1 when a check
fails or a module raises, and 2 for usage errors.

A ``--config`` file holds flat ``key=value`` lines (``#`` starts a comment);
keys are the long option names with dashes or underscores. Command-line
flags override the file.
"""

from __future__ import annotations

import argparse
import math
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__, io, suites
from . import barrier as barrier_mod
from . import flow_evolution, l_geometry, steady_soliton

SUBCOMMANDS = ("soliton", "barrier", "flow", "density", "lgeo", "verify-all")


class ConfigError(ValueError):
    pass


def _positive(kind):
    def parse(text):
        value = kind(text)
        if not value > 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return value
    return parse


def _dimension(text):
    n = int(text)
    if n < 3:
        raise argparse.ArgumentTypeError(f"dimension must be >= 3, got {text}")
    return n


def _float_list(text):
    try:
        vals = [float(t) for t in str(text).split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc
    if not vals or any(not v > 0 for v in vals):
        raise argparse.ArgumentTypeError("values must be positive")
    return vals


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ricciverify", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, n_default=4, tol_default=1e-10, grid_default=None):
        p.add_argument("--n", type=_dimension, default=n_default, help="dimension (>= 3)")
        p.add_argument("--tol", type=_positive(float), default=tol_default, help="tolerance")
        p.add_argument("--grid", type=_positive(int), default=grid_default, help="grid size")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--config", default=None, help="key=value configuration file")
        p.add_argument("--seed", type=int, default=0, help="seed for randomized perturbations")
        return p

    p = common(sub.add_parser("soliton", help="singular steady soliton and its asymptotics"),
               grid_default=2000)
    p.add_argument("--r-max", type=_positive(float), default=None,
                   help="outer end of the sampled range (default 40 sqrt(n-2))")

    p = common(sub.add_parser("barrier", help="barrier psi_a: construction and checks"),
               tol_default=1e-8, grid_default=3000)
    p.add_argument("--a", type=_positive(float), default=None,
                   help="barrier parameter (default: twice the reference threshold)")
    p.add_argument("--junction", type=_positive(float), default=None,
                   help="junction radius N in units of r_* (default: reference value)")
    p.add_argument("--find-min-a", type=_bool, nargs="?", const=True, default=False,
                   help="search the smallest admissible a")

    p = common(sub.add_parser("flow", help="radial Ricci flow experiments"),
               n_default=3, tol_default=1e-8, grid_default=20)
    p.add_argument("--preset", choices=("sphere", "soliton", "comparison"), default="sphere")
    p.add_argument("--refine", type=int, default=3, help="number of grid halvings (sphere)")
    p.add_argument("--dt", type=_positive(float), default=0.01, help="base time step")

    p = common(sub.add_parser("density", help="Gaussian densities of round shrinkers"),
               tol_default=1e-12)
    p.add_argument("--n-max", type=_dimension, default=50)

    p = common(sub.add_parser("lgeo", help="reduced distance and volume on model flows"),
               tol_default=1e-6, grid_default=200)
    p.add_argument("--model", choices=l_geometry.KINDS + ("all",), default="all")
    p.add_argument("--tau", type=_float_list, default=[1.0, 10.0, 100.0],
                   help="comma-separated backward times")
    p.add_argument("--rho0", type=_positive(float), default=0.1)

    common(sub.add_parser("verify-all", help="every module's invariant suite"), tol_default=1e-6)
    return parser


def read_config(path) -> dict:
    """Parse a flat key=value file; keys are normalised to argparse dests."""
    cfg = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        cfg[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return cfg


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            cfg = read_config(args.config)
        except ConfigError as exc:
            parser.error(str(exc))
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        dests = {a.dest for a in subparser._actions}
        unknown = sorted(set(cfg) - dests - {"command", "config"})
        if unknown:
            parser.error(f"unknown config keys for {args.command}: {', '.join(unknown)}")
        cfg.pop("config", None)
        cfg.pop("command", None)
        subparser.set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


def _effective_config(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "config"}


def _out_dir(args) -> Path:
    out = Path(args.out or Path("ricciverify-out") / args.command)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _finish(args, out: Path, report: dict, files: list[str]) -> int:
    report_path = io.write_json(out / "report.json", report)
    files = sorted(set(files) | {report_path.name})
    config = _effective_config(args)
    hashed = {k: v for k, v in config.items() if k != "out"}
    manifest = {"command": args.command, "config": config, "config_hash": io.config_hash(hashed),
                "versions": {"ricciverify": __version__, "numpy": np.__version__,
                             "scipy": scipy.__version__, "python": platform.python_version()},
                "outputs": files, "passed": report["passed"]}
    io.write_json(out / "manifest.json", manifest)
    status = "PASS" if report["passed"] else "FAIL"
    print(f"{args.command}: {status} (report: {report_path})")
    for name, check in sorted(_flatten_checks(report).items()):
        if not check:
            print(f"  failed: {name}")
    return 0 if report["passed"] else 1


def _flatten_checks(report) -> dict:
    flat = {}
    for module in report.get("modules", [report]):
        for name, c in module.get("checks", {}).items():
            flat[f"{module.get('module', report.get('command'))}.{name}"] = bool(c["passed"])
    return flat


def _write_tables(out: Path, tables: dict) -> list[str]:
    files = []
    for name, (header, rows) in sorted(tables.items()):
        files.append(io.write_csv(out / f"{name}.csv", header, rows).name)
    return files


def run_soliton(args, out):
    n = args.n
    k = n - 2
    hi = args.r_max or 40.0 * math.sqrt(k)
    base = steady_soliton.solve_singular_soliton(n, tol=args.tol)
    lo = base.r_star if base.r_star else base.r_min
    prof = steady_soliton.solve_singular_soliton(n, r_range=(lo, hi), tol=args.tol, samples=args.grid)
    checks, info = suites.soliton_check(n, args.tol)
    checks.update(suites.identity_check(n, base))
    files = [io.write_csv(out / "profile.csv", ["r", "phi", "phi_r", "phi_rr"],
                          zip(prof.r, prof.phi, prof.phi_r, prof.phi_rr), {"n": n}).name]
    report = {"command": "soliton", "n": n, "passed": all(c["passed"] for c in checks.values()),
              "checks": checks, "info": info}
    return report, files


def run_barrier(args, out):
    n = args.n
    if args.find_min_a:
        sol = steady_soliton.solve_singular_soliton(n)
        search = barrier_mod.find_min_a(n, soliton=sol)
        rep = search.report
        psi = barrier_mod.build_barrier(n, rep.a, search.N, sol)
        info = {"A_min": search.A_min, "search_steps": len(search.history)}
    else:
        if n not in barrier_mod.REFERENCE_THRESHOLDS and (args.a is None or args.junction is None):
            raise ConfigError(f"no reference threshold for n = {n}; pass --a and --junction "
                              "or use --find-min-a")
        A_ref, f_ref = barrier_mod.REFERENCE_THRESHOLDS.get(n, (None, None))
        sol = steady_soliton.solve_singular_soliton(n)
        a = args.a if args.a is not None else 2 * A_ref
        N = (args.junction if args.junction is not None else f_ref) * sol.r_star
        psi = barrier_mod.build_barrier(n, a, N, sol)
        rep = barrier_mod.verify_barrier(psi, args.grid)
        info = {"A_min_reference": A_ref}
    checks = dict(rep.checks)
    c1 = checks["c1_junction"]
    c1["passed"] = bool(c1["value_jump"] <= args.tol and c1["slope_jump"] <= args.tol)
    c1["tol"] = args.tol
    report = {"command": "barrier", **rep.to_dict(), "checks": checks, "info": info,
              "passed": all(c["passed"] for c in checks.values())}
    s = np.geomspace(psi.domain[0], psi.domain[1], 400)
    files = [io.write_csv(out / "psi.csv", ["s", "psi", "D"],
                          zip(s, psi(s), _safe_residual(psi, s)), {"n": n, "a": psi.a}).name]
    return report, files


def _safe_residual(psi, s):
    D = np.full(s.size, math.nan)
    for i, x in enumerate(s):
        try:
            D[i] = barrier_mod.supersolution_residual(psi, x)[0]
        except barrier_mod.JunctionPoint:
            pass
    return D


def run_flow(args, out):
    files = []
    if args.preset == "sphere":
        rows = flow_evolution.sphere_convergence(n=args.n, cells=args.grid, dt=args.dt,
                                                 refinements=args.refine)
        ratios = [r.ratio for r in rows[1:]]
        checks = {"convergence_ratio": {"passed": bool(ratios) and min(ratios) >= 3.5,
                                        "ratios": ratios, "errors": [r.error for r in rows]}}
        files.append(io.write_csv(out / "convergence.csv", ["cells", "dt", "error", "ratio"],
                                  [(r.cells, r.dt, r.error, math.nan if r.ratio is None else r.ratio)
                                   for r in rows]).name)
    elif args.preset == "soliton":
        sol = steady_soliton.solve_singular_soliton(args.n)
        rep = flow_evolution.soliton_stationarity(sol, dt=args.dt)
        checks = {"stationarity": {"passed": rep.passed, "defect": rep.defect, "drift": rep.drift,
                                   "drift_per_time": rep.drift_per_time}}
    else:
        checks = {f"comparison_n{args.n}": suites.comparison_check(args.n)}
    report = {"command": "flow", "preset": args.preset, "checks": checks,
              "passed": all(c["passed"] for c in checks.values())}
    return report, files


def run_density(args, out):
    res = suites.density_suite(args.n_max, args.tol)
    return {"command": "density", **res.to_dict()}, _write_tables(out, res.tables)


def run_lgeo(args, out):
    kinds = l_geometry.KINDS if args.model == "all" else (args.model,)
    checks, rows = {}, []
    for kind in kinds:
        flow = l_geometry.ModelFlow(kind, args.n, args.rho0)
        rep = l_geometry.check_l_bounds(flow, args.tau, tol=args.tol, volume_points=args.grid)
        checks[f"{kind}.bounds"] = {"passed": rep.passed, **rep.to_dict()}
        for r in rep.rows:
            rows.append((kind, r.tau, r.min_l, r.c, r.C, r.gradient_C, r.volume))
    if args.model in ("all", "flat"):
        flat = l_geometry.ModelFlow("flat", args.n)
        x = np.random.default_rng(args.seed).normal(size=args.n)
        tau = args.tau[0]
        cfg = l_geometry.PathOptConfig(perturb=0.1, seed=args.seed)
        rd = l_geometry.reduced_distance(flat, np.zeros(args.n), x, tau, config=cfg)
        exact = float(x @ x) / (4 * tau)
        err = abs(rd.value / exact - 1)
        checks["flat.distance"] = {"passed": err <= args.tol, "value": rd.value, "exact": exact,
                                   "rel_err": err, "levels": rd.history}
        rd.path.to_csv(out / "flat_path.csv", n=args.n)
    files = [io.write_csv(out / "l_bounds.csv",
                          ["model", "tau", "min_l", "c", "C", "gradient_C", "volume"], rows).name]
    if (out / "flat_path.csv").exists():
        files.append("flat_path.csv")
    report = {"command": "lgeo", "checks": checks,
              "passed": all(c["passed"] for c in checks.values())}
    return report, files


def run_verify_all(args, out):
    """Run every suite in a fixed order; a module that raises counts as failed."""
    modules, files = [], []
    plan = [("density", lambda: suites.density_suite()),
            ("soliton", lambda: suites.soliton_suite()),
            ("barrier", lambda: suites.barrier_suite()),
            ("flow", lambda: suites.flow_suite()),
            ("lgeo", lambda: suites.lgeo_suite(n=args.n, seed=args.seed, tol=args.tol))]
    for name, fn in sorted(plan):
        try:
            res = fn()
        except Exception as exc:  # report, do not abort the remaining modules
            modules.append({"module": name, "passed": False,
                            "checks": {"error": {"passed": False, "message": f"{name}: {exc}"}}})
            continue
        modules.append(res.to_dict())
        files += _write_tables(out, {f"{name}_{k}": v for k, v in res.tables.items()})
    report = {"command": "verify-all", "modules": modules,
              "passed": all(m["passed"] for m in modules)}
    return report, files


RUNNERS = {"soliton": run_soliton, "barrier": run_barrier, "flow": run_flow,
           "density": run_density, "lgeo": run_lgeo, "verify-all": run_verify_all}


def main(argv=None) -> int:
    args = parse_args(argv)
    out = _out_dir(args)
    try:
        report, files = RUNNERS[args.command](args, out)
    except ConfigError as exc:
        print(f"ricciverify {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"ricciverify {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        report = {"command": args.command, "passed": False,
                  "checks": {"error": {"passed": False, "message": f"{args.command}: {exc}"}}}
        files = []
    return _finish(args, out, report, files)


if __name__ == "__main__":
    sys.exit(main())
