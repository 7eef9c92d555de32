"""Run the rotational oracle, the grid solver and the Monte Carlo estimator on one problem.

Supported problems:

* ``radial_cap``: u0 = z - (sqrt(1 + r^2) - 1) in H^1, a single rotational sheet
  whose axis point has f''(0) = 1.
* ``plane``: u0 = a x + b y - d in H^1, a stationary vertical plane.
* ``constant``: u0 = c, for which every path must return c.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .calculus import ScalarField, horizontal_mean_curvature
from .control import ConstantPolicy, FeedbackPolicy, estimate_v
from .geometry import heisenberg
from .levelset import GridField, SchemeParams, evolve, grid_from_function
from .rotational import RotationalProfile, evolve_profile

__all__ = [
    "GridSurrogate",
    "RadialCapProblem",
    "PlaneProblem",
    "ConstantProblem",
    "radial_cap_field",
    "grid_radius_at",
    "grid_axis_height",
    "interpolate_grid",
    "solve_radial_cap",
    "interface_table",
    "axis_speed",
    "stochastic_probes",
    "run_radial_cap",
    "run_plane",
    "run_constant",
    "crossval",
]


def radial_cap_profile(r):
    return np.sqrt(1 + np.asarray(r) ** 2) - 1


def radial_cap_field() -> ScalarField:
    return ScalarField.from_expression("x3 - (sqrt(1 + x1^2 + x2^2) - 1)", 3)


def interpolate_grid(gf: GridField, points) -> np.ndarray:
    interp = RegularGridInterpolator(gf.axes(), gf.values, bounds_error=False, fill_value=None)
    return interp(np.asarray(points, dtype=float))


class GridSurrogate:
    """Time-dependent value surrogate assembled from grid snapshots.

    ``value_at(s)`` returns a ScalarField for the snapshot nearest to time
    ``s``; values, gradients and Hessians are trilinear interpolants of
    centered differences.  ``for_value_function(T)`` maps path time ``t`` to
    grid time ``T - t``.
    """

    def __init__(self, snapshots: Sequence[GridField]):
        if not snapshots:
            raise ValueError("need at least one snapshot")
        self.snapshots = list(snapshots)
        self.times = np.array([s.time for s in self.snapshots])
        self._cache: dict[int, ScalarField] = {}

    def _build(self, k: int) -> ScalarField:
        gf = self.snapshots[k]
        axes = gf.axes()
        grads = np.gradient(gf.values, *gf.spacing, edge_order=2)
        g = np.stack(grads, axis=-1)
        hess = np.stack([np.stack(np.gradient(gk, *gf.spacing, edge_order=2), axis=-1) for gk in grads], axis=-2)
        hess = 0.5 * (hess + np.swapaxes(hess, -1, -2))
        opts = dict(bounds_error=False, fill_value=None)
        fv = RegularGridInterpolator(axes, gf.values, **opts)
        fg = RegularGridInterpolator(axes, g, **opts)
        fh = RegularGridInterpolator(axes, hess, **opts)
        return ScalarField(fv, fg, fh, label=f"grid(t={gf.time:.4g})")

    def value_at(self, s: float) -> ScalarField:
        k = int(np.argmin(np.abs(self.times - s)))
        if k not in self._cache:
            if len(self._cache) > 2:
                self._cache.pop(next(iter(self._cache)))
            self._cache[k] = self._build(k)
        return self._cache[k]

    def for_value_function(self, T: float):
        return lambda t: self.value_at(T - t)


def _nearest_index(axis: np.ndarray, value: float) -> int:
    return int(np.argmin(np.abs(axis - value)))


def _first_crossing(coords: np.ndarray, vals: np.ndarray) -> float:
    d = vals
    if d[0] == 0:
        return float(coords[0])
    idx = np.nonzero(d[:-1] * d[1:] <= 0)[0]
    if idx.size == 0:
        return float("nan")
    i = idx[0]
    a, b = d[i], d[i + 1]
    frac = 0.0 if a == b else a / (a - b)
    return float(coords[i] + frac * (coords[i + 1] - coords[i]))


def grid_radius_at(gf: GridField, z_level: float) -> float:
    """Mean distance from the axis of the zero level along the four half-axes in the plane ``z = z_level``."""
    ax = gf.axes()
    k = _nearest_index(ax[2], z_level)
    i0, j0 = _nearest_index(ax[0], 0.0), _nearest_index(ax[1], 0.0)
    plane = gf.values[:, :, k]
    rays = [
        (ax[0][i0:] - ax[0][i0], plane[i0:, j0]),
        (ax[0][i0] - ax[0][i0::-1], plane[i0::-1, j0]),
        (ax[1][j0:] - ax[1][j0], plane[i0, j0:]),
        (ax[1][j0] - ax[1][j0::-1], plane[i0, j0::-1]),
    ]
    return float(np.mean([_first_crossing(c, v) for c, v in rays]))


def grid_axis_height(gf: GridField) -> float:
    """Height of the zero level on the ``z`` axis."""
    ax = gf.axes()
    i0, j0 = _nearest_index(ax[0], 0.0), _nearest_index(ax[1], 0.0)
    return _first_crossing(ax[2], gf.values[i0, j0, :])


def _check(name: str, value: float, tol: float, **extra) -> dict:
    ok = bool(np.isfinite(value) and value <= tol)
    return {"name": name, "value": float(value), "tolerance": float(tol), "passed": ok, **extra}


@dataclass
class RadialCapProblem:
    lower: tuple = (-1.0, -1.0, -0.25)
    upper: tuple = (1.0, 1.0, 0.75)
    h: float = 1 / 32
    T: float = 0.2
    snap_every: float = 0.005
    cfl: float = 0.9
    z_level: float = 0.25
    r_max: float = 2.0
    speed_window: float = 0.02
    probes: tuple = ((0.1, (0.5, 0.0, 0.2)), (0.1, (0.0, 0.4, 0.0)),
                     (0.05, (0.3, 0.3, 0.3)), (0.15, (-0.4, 0.1, 0.05)), (0.2, (0.2, -0.2, 0.1)))
    n_paths: int = 10_000
    sde_dt: float = 1e-4
    seed: int = 20240917
    char_tol: float = 1e-6
    workers: int = 1
    run_stochastic: bool = True


@dataclass
class PlaneProblem:
    a: float = 1.0
    b: float = 2.0
    d: float = 1.0
    lower: tuple = (-0.5, -0.5, -0.5)
    upper: tuple = (0.5, 0.5, 0.5)
    h: float = 1 / 32
    T: float = 0.5
    cfl: float = 0.9
    probes: tuple = ((0.25, (0.1, 0.2, 0.0)), (0.5, (-0.3, 0.4, 0.2)))
    n_paths: int = 2000
    sde_dt: float = 1e-3
    seed: int = 7
    tolerance: float = 1e-3
    run_stochastic: bool = True


@dataclass
class ConstantProblem:
    c: float = 0.5
    lower: tuple = (-0.5, -0.5, -0.5)
    upper: tuple = (0.5, 0.5, 0.5)
    h: float = 1 / 8
    T: float = 0.1
    x0: tuple = (0.1, 0.2, 0.3)
    n_paths: int = 500
    sde_dt: float = 1e-2
    seed: int = 3


def solve_radial_cap(prob: RadialCapProblem):
    """Grid evolution and 1-D profile evolution sharing the same snapshot times."""
    frame = heisenberg(1)
    grid0 = grid_from_function(radial_cap_field(), prob.lower, prob.upper, prob.h)
    snaps = sorted(set(np.round(np.arange(1, round(prob.T / prob.snap_every) + 1) * prob.snap_every, 12))
                   | {prob.speed_window} | {p[0] for p in prob.probes})
    res = evolve(frame, grid0, prob.T, SchemeParams(cfl=prob.cfl), snap_times=snaps)
    profile = evolve_profile(radial_cap_profile, prob.T, r_max=prob.r_max, h=prob.h / 2, snap_times=snaps)
    return res, profile


def interface_table(prob: RadialCapProblem, res, profile: Sequence[RotationalProfile]) -> list[dict]:
    prof_at = {round(p.time, 12): p for p in profile}
    rows = []
    for gf in res.snapshots:
        p = prof_at[round(gf.time, 12)]
        rg, rp = grid_radius_at(gf, prob.z_level), p.radius_at(prob.z_level)
        rows.append({"t": gf.time, "grid_radius": rg, "profile_radius": rp, "gap": abs(rg - rp),
                     "grid_axis": grid_axis_height(gf), "profile_axis": float(p.f[0])})
    return rows


def axis_speed(prob: RadialCapProblem, rows: list[dict]) -> float:
    """Average upward speed of the axis point over the first ``speed_window`` of time."""
    w = next(r for r in rows if abs(r["t"] - prob.speed_window) < 1e-12)
    return (w["grid_axis"] - rows[0]["grid_axis"]) / prob.speed_window


def stochastic_probes(prob: RadialCapProblem, res) -> list[dict]:
    """Feedback-policy value estimates against the grid solution at the configured probes."""
    frame = heisenberg(1)
    u0 = radial_cap_field()
    surrogate = GridSurrogate(res.snapshots)
    rows = []
    for tau, x0 in prob.probes:
        pol = FeedbackPolicy(surrogate.for_value_function(tau), char_tol=prob.char_tol)
        x0 = np.asarray(x0, dtype=float)
        est = estimate_v(frame, x0, 0.0, tau, u0, [pol], prob.n_paths, prob.sde_dt, prob.seed, "max",
                         workers=prob.workers)
        gf = min(res.snapshots, key=lambda s: abs(s.time - tau))
        pde = float(interpolate_grid(gf, x0[None, :])[0])
        disc = abs(est.value - pde)
        tol = 3 * (est.stderr + prob.h)
        rows.append({"t": tau, "x0": x0.tolist(), "V_mc": est.value, "stderr": est.stderr, "u_grid": pde,
                     "discrepancy": disc, "tolerance": tol, "passed": bool(disc <= tol)})
    return rows


def run_radial_cap(prob: RadialCapProblem) -> dict:
    res, profile = solve_radial_cap(prob)
    rows = interface_table(prob, res, profile)
    gap = max(r["gap"] for r in rows)
    speed = axis_speed(prob, rows)
    checks = [
        _check("interface radius: grid vs profile", gap, 2 * prob.h),
        _check("axis speed vs f''(0) = 1 (relative)", abs(speed - 1.0), 0.1, speed=speed),
    ]
    out = {"problem": "radial_cap", "interface": rows, "axis_speed": speed, "grid_meta": res.meta}
    if prob.run_stochastic:
        probe_rows = stochastic_probes(prob, res)
        out["probes"] = probe_rows
        worst = max(r["discrepancy"] / r["tolerance"] for r in probe_rows)
        checks.append(_check("stochastic vs grid (discrepancy / tolerance)", worst, 1.0))
    out["checks"] = checks
    out["passed"] = all(c["passed"] for c in checks)
    return out


def run_plane(prob: PlaneProblem) -> dict:
    frame = heisenberg(1)
    expr = f"{prob.a!r}*x1 + {prob.b!r}*x2 - {prob.d!r}"
    u0 = ScalarField.from_expression(expr, 3)
    grid0 = grid_from_function(u0, prob.lower, prob.upper, prob.h)
    res = evolve(frame, grid0, prob.T, SchemeParams(cfl=prob.cfl))
    inner = (slice(1, -1),) * 3
    grid_change = float(np.max(np.abs(res.final.values - grid0.values)[inner]))
    rng = np.random.default_rng(prob.seed)
    pts = rng.uniform(prob.lower, prob.upper, size=(100, 3))
    curv = float(np.max(np.abs(horizontal_mean_curvature(frame, u0, pts))))
    checks = [_check("curvature oracle |k0|", curv, prob.tolerance),
              _check("grid interior max change", grid_change, prob.tolerance)]
    out = {"problem": "plane", "expression": expr, "grid_max_change": grid_change, "max_abs_curvature": curv}
    if prob.run_stochastic:
        rows = []
        for tau, x0 in prob.probes:
            est = estimate_v(frame, np.asarray(x0, float), 0.0, tau, u0, [FeedbackPolicy(u0)], prob.n_paths,
                             prob.sde_dt, prob.seed)
            exact = float(u0(np.asarray(x0, float)))
            rows.append({"t": tau, "x0": list(x0), "V_mc": est.value, "u0": exact,
                         "discrepancy": abs(est.value - exact)})
        out["probes"] = rows
        checks.append(_check("stochastic vs stationary value", max(r["discrepancy"] for r in rows), prob.tolerance))
    out["checks"] = checks
    out["passed"] = all(c["passed"] for c in checks)
    return out


def run_constant(prob: ConstantProblem) -> dict:
    frame = heisenberg(1)
    c = prob.c
    g = ScalarField(lambda x: np.full(np.shape(x)[:-1], c), lambda x: np.zeros(np.shape(x)),
                    lambda x: np.zeros(np.shape(x) + (np.shape(x)[-1],)), label=f"const {c}")
    grid0 = grid_from_function(g, prob.lower, prob.upper, prob.h)
    res = evolve(frame, grid0, prob.T, SchemeParams())
    pde_gap = float(np.max(np.abs(res.final.values - c)))
    est = estimate_v(frame, np.asarray(prob.x0, float), 0.0, prob.T, g,
                     [ConstantPolicy([1.0, 0.0], "fan[0]")], prob.n_paths, prob.sde_dt, prob.seed)
    checks = [_check("grid stays constant", pde_gap, 1e-12),
              _check("stochastic value equals the constant", abs(est.value - c), 1e-12)]
    return {"problem": "constant", "checks": checks, "passed": all(k["passed"] for k in checks)}


_PROBLEMS = {"radial_cap": (RadialCapProblem, run_radial_cap),
             "plane": (PlaneProblem, run_plane),
             "constant": (ConstantProblem, run_constant)}


def crossval(config: dict) -> dict:
    """Run one cross-validation problem; ``config = {"problem": name, **overrides}``."""
    cfg = dict(config)
    name = cfg.pop("problem", "radial_cap")
    if name not in _PROBLEMS:
        raise ValueError(f"unknown crossval problem {name!r}; expected one of {sorted(_PROBLEMS)}")
    cls, runner = _PROBLEMS[name]
    known = set(cls.__dataclass_fields__)
    extra = set(cfg) - known
    if extra:
        raise ValueError(f"unknown settings for {name}: {sorted(extra)}")
    for key in ("lower", "upper"):
        if key in cfg:
            cfg[key] = tuple(cfg[key])
    if "probes" in cfg:
        cfg["probes"] = tuple((float(t), tuple(x)) for t, x in cfg["probes"])
    prob = cls(**cfg)
    try:
        report = runner(prob)
    except Exception as exc:
        raise RuntimeError(f"crossval {name} failed: {exc}") from exc
    report["settings"] = asdict(prob)
    return report
