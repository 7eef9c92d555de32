"""Command-line entry point ``hmcf``.

Exit status: 0 on success, 1 on a numerical failure, 2 on a bad configuration.
Options can also come from ``--config FILE`` (a JSON object keyed by option
name); explicit flags win over the file.  ``HMCF_OUTPUT_DIR`` overrides the
output directory of commands that write files.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .calculus import (CharacteristicPointError, char_scan, cylinder_points, default_char_tol,
                       horizontal_inf_laplacian, horizontal_laplacian, is_characteristic, jet, sphere_points,
                       torus_points)
from .control import (ConstantPolicy, FeedbackPolicy, PathBlowUpError, direction_fan, ess_sup, estimate_vp,
                      simulate)
from .crossval import crossval
from .expressions import ExpressionError
from .fields import parse_field, parse_profile
from .geometry import GeometryError, hormander_step, lie_bracket, make_geometry
from .levelset import BRANCHES, SchemeParams, evolve, grid_from_function, zero_level_extract
from .output import RunConfig, dumps, resolve_output_dir, write_csv, write_json
from .rotational import (SURFACES, evolve_profile, heisenberg_ball_point, named_characteristic_points,
                         named_curvature)

log = logging.getLogger("hmcf")

EXIT_OK, EXIT_NUMERIC, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    pass


def _floats(text: str, count: int | None = None, what: str = "value") -> list[float]:
    try:
        vals = [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"cannot read {what} {text!r} as comma-separated numbers") from None
    if count is not None and len(vals) != count:
        raise ConfigError(f"{what} needs {count} numbers, got {len(vals)}")
    return vals


def _emit(obj) -> None:
    sys.stdout.write(dumps(obj))


def _out_dir(args, command: str) -> Path:
    return resolve_output_dir(args.out, f"hmcf_out/{command}")


def _save_config(args, out: Path, geometry=None, field=None) -> None:
    params = {k: v for k, v in vars(args).items() if k not in ("func", "config", "command")}
    RunConfig(args.command, geometry, field, params, str(out)).write(out)


# -- subcommands --------------------------------------------------------------------

def cmd_geom(args) -> int:
    frame = make_geometry(args.geometry)
    x = np.array(_floats(args.point, frame.n, "point")) if args.point else np.full(frame.n, 0.3)
    res = hormander_step(frame, x)
    brackets = {f"[X{i + 1},X{j + 1}]": lie_bracket(frame, i, j, x)
                for i in range(frame.m) for j in range(i + 1, frame.m)}
    _emit({"geometry": frame.label, "n": frame.n, "m": frame.m, "point": x, "sigma": frame.sigma(x),
           "hormander": {"satisfied": res.satisfied, "step": res.step,
                         "singular_values": res.singular_values, "diagnostic": res.diagnostic},
           "brackets": brackets})
    return EXIT_OK


def cmd_curvature(args) -> int:
    frame = make_geometry(args.geometry)
    fld = parse_field(args.field, frame.n)
    if args.fd:
        fld = fld.without_derivatives()
    x = np.array(_floats(args.point, frame.n, "point"))
    tol = args.char_tol if args.char_tol is not None else default_char_tol(fld)
    j = jet(frame, fld, x)
    lap = float(horizontal_laplacian(j))
    char = bool(is_characteristic(j, tol))
    report = {"geometry": frame.label, "field": args.field, "point": x, "euclid_grad": j.euclid_grad,
              "horiz_grad": j.horiz_grad, "correction": j.correction, "horiz_hess": j.horiz_hess,
              "laplacian": lap, "characteristic": char, "char_tol": tol, "derivatives": "fd" if args.fd else
              ("analytic" if fld.analytic else "fd")}
    if char:
        report["inf_laplacian"] = None
        report["curvature"] = None
    else:
        inf = float(horizontal_inf_laplacian(j, tol))
        report["inf_laplacian"] = inf
        report["curvature"] = (lap - inf) / float(j.horiz_grad_norm)
    _emit(report)
    return EXIT_OK


def _sampler(spec: str, count: int) -> np.ndarray:
    name, _, rest = spec.partition(":")
    vals = _floats(rest, what="sampler parameters") if rest else []
    if name == "sphere":
        return sphere_points(*(vals or [1.0]), n_theta=count, n_phi=count)
    if name == "cylinder":
        return cylinder_points(*(vals or [1.0, 2.0]), n_z=count, n_phi=count)
    if name == "torus":
        return torus_points(*(vals or [2.0, 0.5]), n_u=count, n_v=count)
    raise ConfigError(f"unknown sampler {name!r}; use sphere:R, cylinder:R,H or torus:R,r")


def cmd_char_scan(args) -> int:
    frame = make_geometry(args.geometry)
    fld = parse_field(args.field, frame.n)
    pts = _sampler(args.sampler, args.resolution)
    tol = args.char_tol if args.char_tol is not None else default_char_tol(fld)
    hits = char_scan(frame, fld, pts, tol)
    distinct = np.unique(np.round(hits, 9), axis=0) if hits.size else hits
    _emit({"geometry": frame.label, "field": args.field, "sampler": args.sampler, "n_samples": len(pts),
           "char_tol": tol, "n_hits": len(hits), "distinct_points": distinct})
    return EXIT_OK


def cmd_evolve_grid(args) -> int:
    frame = make_geometry(args.geometry)
    fld = parse_field(args.initial, frame.n)
    box = _floats(args.box, 2 * frame.n, "box")
    lower, upper = box[0::2], box[1::2]
    grid = grid_from_function(fld, lower, upper, args.h)
    params = SchemeParams(epsilon=args.epsilon, char_tol=args.char_tol, cfl=args.cfl, branch=args.branch)
    res = evolve(frame, grid, args.T, params, snap_every=args.snap_every)
    out = _out_dir(args, "evolve-grid")
    _save_config(args, out, frame.label, args.initial)
    names = [f"x{k + 1}" for k in range(frame.n)]
    for k, snap in enumerate(res.snapshots):
        nodes = snap.nodes().reshape(-1, frame.n)
        write_csv(out / f"snapshot_{k:04d}.csv", names + ["t", "u"],
                  (list(p) + [snap.time, v] for p, v in zip(nodes, snap.values.ravel())))
        pts, _ = zero_level_extract(snap)
        write_csv(out / f"zero_level_{k:04d}.csv", names + ["t"], (list(p) + [snap.time] for p in pts))
    meta = {"dt_max": res.dt, "s_max": res.s_max, "n_steps": res.n_steps, "epsilon": res.meta["epsilon"],
            "branch": params.branch, "cfl": params.cfl, "char_tol": params.char_tol,
            "snapshot_times": [s.time for s in res.snapshots], "version": __version__}
    write_json(out / "run.json", meta)
    _emit({"output_dir": str(out), **meta})
    return EXIT_OK


def cmd_evolve_rotational(args) -> int:
    f0 = parse_profile(args.f0)
    snaps = None
    if args.snap_every:
        snaps = list(np.arange(1, int(np.floor(args.T / args.snap_every)) + 1) * args.snap_every)
    traj = evolve_profile(f0, args.T, r_max=args.rmax, h=args.h, snap_times=snaps)
    out = _out_dir(args, "evolve-rotational")
    _save_config(args, out, "heisenberg(1)", args.f0)
    rows = ([p.time, r, f] for p in traj for r, f in zip(p.r_grid, p.f))
    write_csv(out / "profile.csv", ["t", "r", "f"], rows)
    _emit({"output_dir": str(out), "times": [p.time for p in traj], "axis_height": [p.f[0] for p in traj]})
    return EXIT_OK


def cmd_named_curvature(args) -> int:
    point = _floats(args.point, 3, "point") if args.point else None
    k0 = named_curvature(args.surface, args.R, point=point, c=args.c, tol=args.tol)
    rep = {"surface": args.surface, "R": args.R, "curvature": k0,
           "characteristic_points": named_characteristic_points(args.surface, args.R)}
    if point is not None:
        rep["point"] = point
    if args.c is not None:
        rep["c"] = args.c
        rep["r"], rep["z"] = heisenberg_ball_point(args.R, args.c)
    _emit(rep)
    return EXIT_OK


def _policy_family(kind: str, frame, g, char_tol):
    fam = []
    if kind in ("feedback", "both"):
        fam.append(FeedbackPolicy(g, char_tol))
    if kind in ("fan", "both"):
        fam += [ConstantPolicy(a, name=f"fan[{i}]") for i, a in enumerate(direction_fan(frame.m))]
    if not fam:
        raise ConfigError(f"unknown policy selection {kind!r}")
    return fam


def cmd_value_function(args) -> int:
    frame = make_geometry(args.geometry)
    g = parse_field(args.terminal, frame.n)
    x0 = np.array(_floats(args.x0, frame.n, "x0"))
    p_list = _floats(args.p, what="p list") if args.p else []
    mode = args.ess_sup
    tol = args.char_tol if args.char_tol is not None else default_char_tol(g)
    fam = _policy_family(args.policy, frame, g, tol)
    per = {}
    best_name, best_val = None, None
    dump_rows = []
    for pol in fam:
        ens = simulate(frame, x0, args.t0, args.T, pol, args.paths, args.dt, args.seed, workers=args.workers)
        vals = g(ens.states)
        sup = ess_sup(vals, mode)
        stderr = float(np.std(vals, ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else 0.0
        per[pol.name] = {"ess_sup": sup, "stderr": stderr, "mean": float(np.mean(vals)),
                         "vp": {repr(p): v for p, v in zip(p_list, estimate_vp(frame, x0, args.t0, args.T, g,
                                                                            p_list, pol, args.paths, args.dt,
                                                                            args.seed, samples=vals))}}
        if best_val is None or sup < best_val:
            best_name, best_val = pol.name, sup
        if args.dump_paths:
            dump_rows += [[pol.name, i] + list(s) + [v] for i, (s, v) in enumerate(zip(ens.states, vals))]
    report = {"geometry": frame.label, "terminal": args.terminal, "x0": x0, "t0": args.t0, "T": args.T,
              "paths": args.paths, "dt": args.dt, "seed": args.seed, "ess_sup_mode": mode,
              "value": best_val, "best_policy": best_name, "stderr": per[best_name]["stderr"],
              "per_policy": per}
    out = _out_dir(args, "value-function")
    _save_config(args, out, frame.label, args.terminal)
    write_json(out / "value.json", report)
    if args.dump_paths:
        write_csv(out / "endpoints.csv", ["policy", "path"] + [f"x{k + 1}" for k in range(frame.n)] + ["g"],
                  dump_rows)
    _emit(report)
    return EXIT_OK


def cmd_crossval(args) -> int:
    cfg = {"problem": args.problem}
    if args.settings:
        try:
            extra = json.loads(args.settings)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--settings is not valid JSON: {exc}") from None
        if not isinstance(extra, dict):
            raise ConfigError("--settings must be a JSON object")
        cfg.update(extra)
    report = crossval(cfg)
    out = _out_dir(args, "crossval")
    _save_config(args, out, "heisenberg(1)", args.problem)
    write_json(out / "report.json", report)
    rows = [[c["name"], c["value"], c["tolerance"], "pass" if c["passed"] else "fail"] for c in report["checks"]]
    write_csv(out / "checks.csv", ["check", "value", "tolerance", "result"], rows)
    _emit({"output_dir": str(out), "passed": report["passed"], "checks": report["checks"]})
    return EXIT_OK if report["passed"] else EXIT_NUMERIC


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hmcf", description="Horizontal mean curvature flow toolkit.")
    ap.add_argument("--version", action="version", version=f"hmcf {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON file with option values")
        p.set_defaults(func=func)
        return p

    p = add("geom", cmd_geom, "frame summary, brackets and Hormander step")
    p.add_argument("--geometry", default="heisenberg(1)")
    p.add_argument("--point")

    p = add("curvature", cmd_curvature, "horizontal jet and curvature at a point")
    p.add_argument("--geometry", default="heisenberg(1)")
    p.add_argument("--field", required=True)
    p.add_argument("--point", required=True)
    p.add_argument("--fd", action="store_true", help="ignore symbolic derivatives")
    p.add_argument("--char-tol", type=float)

    p = add("char-scan", cmd_char_scan, "characteristic points on a sampled surface")
    p.add_argument("--geometry", default="heisenberg(1)")
    p.add_argument("--field", required=True)
    p.add_argument("--sampler", default="sphere:1")
    p.add_argument("--resolution", type=int, default=100)
    p.add_argument("--char-tol", type=float)

    p = add("evolve-grid", cmd_evolve_grid, "level-set evolution on a grid")
    p.add_argument("--geometry", default="heisenberg(1)")
    p.add_argument("--initial", required=True)
    p.add_argument("--box", required=True, help="x1lo,x1hi,x2lo,x2hi[,x3lo,x3hi]")
    p.add_argument("--h", type=float, required=True)
    p.add_argument("--T", type=float, required=True)
    p.add_argument("--branch", choices=BRANCHES, default="regularized")
    p.add_argument("--snap-every", type=float)
    p.add_argument("--cfl", type=float, default=0.5)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--char-tol", type=float, default=1e-8)
    p.add_argument("--out")

    p = add("evolve-rotational", cmd_evolve_rotational, "rotational profile evolution in H^1")
    p.add_argument("--f0", required=True, help="profile expression in r")
    p.add_argument("--rmax", type=float, default=2.0)
    p.add_argument("--h", type=float, default=1 / 64)
    p.add_argument("--T", type=float, required=True)
    p.add_argument("--snap-every", type=float)
    p.add_argument("--out")

    p = add("named-curvature", cmd_named_curvature, "closed-form curvature of named spheres in H^1")
    p.add_argument("--surface", choices=SURFACES, required=True)
    p.add_argument("--R", type=float, default=1.0)
    p.add_argument("--point")
    p.add_argument("--c", type=float)
    p.add_argument("--tol", type=float, default=1e-8)

    p = add("value-function", cmd_value_function, "Monte Carlo value-function estimate")
    p.add_argument("--geometry", default="heisenberg(1)")
    p.add_argument("--terminal", required=True)
    p.add_argument("--x0", required=True)
    p.add_argument("--t0", type=float, default=0.0)
    p.add_argument("--T", type=float, required=True)
    p.add_argument("--paths", type=int, default=1000)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--p", default="", help="comma-separated L^p exponents")
    p.add_argument("--policy", choices=("feedback", "fan", "both"), default="both")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ess-sup", default="max", help="max or quantile:Q")
    p.add_argument("--char-tol", type=float)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--dump-paths", action="store_true")
    p.add_argument("--out")

    p = add("crossval", cmd_crossval, "compare rotational, grid and stochastic solutions")
    p.add_argument("--problem", choices=("radial_cap", "plane", "constant"), default="radial_cap")
    p.add_argument("--settings", help="JSON object overriding problem settings")
    p.add_argument("--out")
    return ap


def _config_path(argv: list[str]) -> str | None:
    for k, tok in enumerate(argv):
        if tok == "--config" and k + 1 < len(argv):
            return argv[k + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def parse_args(argv=None) -> argparse.Namespace:
    """Parse flags, using values from ``--config`` as defaults (flags win)."""
    ap = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    path = _config_path(argv)
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
        choices = ap._subparsers._group_actions[0].choices
        command = next((tok for tok in argv if tok in choices), None)
        if command is None:
            raise ConfigError("no subcommand given")
        sp = choices[command]
        doc = {k.replace("-", "_"): v for k, v in doc.items()}
        actions = {a.dest: a for a in sp._actions}
        bad = sorted(k for k in doc if k not in actions or k in ("help", "config"))
        if bad:
            raise ConfigError(f"unknown config keys for {command}: {bad}")
        for k in doc:
            actions[k].required = False
        sp.set_defaults(**doc)
    return ap.parse_args(argv)


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except ConfigError as exc:
        print(f"hmcf: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    warnings.simplefilter("default")
    try:
        return args.func(args)
    except (CharacteristicPointError, PathBlowUpError, FloatingPointError, ArithmeticError) as exc:
        print(f"hmcf: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ExpressionError, GeometryError, ValueError, KeyError, OSError) as exc:
        print(f"hmcf: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RuntimeError as exc:
        print(f"hmcf: run failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
