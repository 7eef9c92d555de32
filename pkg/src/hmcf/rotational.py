"""Rotationally symmetric surfaces in H^1.

A surface ``z = f(r)`` (``r = sqrt(x^2 + y^2)``) is the zero set of
``u = sign * (f(r) - z)``.  ``radial_curvature`` gives the horizontal mean
curvature of that ``u``; ``evolve_profile`` moves the profile by

    f_t = (4 f'^3 + r^3 f'') / (4 r f'^2 + r^3),      f_t(0) = f''(0),

which is the level-set flow written for ``u = z - f``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "RotationalProfile",
    "ProfileBlowUpError",
    "radial_curvature",
    "profile_velocity",
    "named_curvature",
    "named_characteristic_points",
    "heisenberg_ball_point",
    "on_surface_residual",
    "evolve_profile",
    "SURFACES",
]

SURFACES = ("euclidean_ball", "koranyi_ball", "heisenberg_ball")
DENOM_TOL = 1e-14


class ProfileBlowUpError(FloatingPointError):
    pass


def radial_curvature(fp, fpp, r, sign: int = 1):
    """Horizontal mean curvature of ``sign * (f(r) - z)`` given ``f'`` and ``f''`` at ``r > 0``."""
    fp, fpp, r = (np.asarray(a, dtype=float) for a in (fp, fpp, r))
    if np.any(r <= 0):
        raise ValueError("radial_curvature needs r > 0 (r = 0 is the characteristic axis)")
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    num = 0.25 * r * r * fpp + fp ** 3 / r
    den = (fp * fp + 0.25 * r * r) ** 1.5
    out = sign * num / den
    return float(out) if out.ndim == 0 else out


def profile_velocity(fp, fpp, r, tol: float = DENOM_TOL):
    """``f_t`` from the rotational level-set equation; the axis and tiny denominators use ``f''``."""
    fp, fpp, r = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (fp, fpp, r)))
    den = 4 * r * fp * fp + r ** 3
    ok = (r > 0) & (den >= tol)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = (4 * fp ** 3 + r ** 3 * fpp) / den
    return np.where(ok, v, fpp)


# -- named surfaces ------------------------------------------------------------

def heisenberg_ball_point(R: float, c: float) -> tuple[float, float]:
    """``(r, z)`` on the gauge sphere of radius ``R`` reached with geodesic parameter ``c``."""
    _check_ball_parameter(R, c)
    r = 2.0 / c * math.sin(c * R / 2)
    z = (c * R - math.sin(c * R)) / (2 * c * c)
    return r, z


def _check_ball_parameter(R: float, c: float):
    if R <= 0:
        raise ValueError("R must be positive")
    if not 0 < abs(c) * R < 2 * math.pi:
        raise ValueError("need 0 < |c| R < 2 pi (c R = 2 pi is the characteristic point)")


def on_surface_residual(surface: str, R: float, point) -> float:
    x, y, z = (float(v) for v in point)
    rr = x * x + y * y
    if surface == "euclidean_ball":
        return abs(rr + z * z - R * R) / (R * R)
    if surface == "koranyi_ball":
        return abs(rr * rr + 16 * z * z - R ** 4) / R ** 4
    raise ValueError(f"no implicit equation for {surface!r}")


def named_characteristic_points(surface: str, R: float) -> np.ndarray:
    if surface == "euclidean_ball":
        zc = R
    elif surface == "koranyi_ball":
        zc = R * R / 4
    elif surface == "heisenberg_ball":
        zc = R * R / (4 * math.pi)
    else:
        raise ValueError(f"unknown surface {surface!r}; expected one of {SURFACES}")
    return np.array([[0.0, 0.0, zc], [0.0, 0.0, -zc]])


def named_curvature(surface: str, R: float, point=None, c: float | None = None, tol: float = 1e-8) -> float:
    """Closed-form horizontal mean curvature (outward normal) of a named sphere in H^1.

    Euclidean and gauge balls take a point on the surface; the Heisenberg
    ball takes the geodesic parameter ``c`` instead.
    """
    if R <= 0:
        raise ValueError("R must be positive")
    if surface == "heisenberg_ball":
        if c is None:
            raise ValueError("heisenberg_ball needs the geodesic parameter c")
        _check_ball_parameter(R, c)
        cr = c * R
        half = cr / 2
        return (0.5 * (c / 2) / math.sin(half) * (math.sin(cr) - cr * math.cos(cr))
                / (math.sin(half) - half * math.cos(half)))
    if point is None:
        raise ValueError(f"{surface} needs a point")
    if surface not in SURFACES:
        raise ValueError(f"unknown surface {surface!r}; expected one of {SURFACES}")
    res = on_surface_residual(surface, R, point)
    if res > tol:
        raise ValueError(f"point is off the surface (relative residual {res:.2e} > {tol:.1e})")
    x, y, z = (float(v) for v in point)
    r = math.hypot(x, y)
    if r == 0:
        raise ValueError("characteristic point: curvature undefined on the axis")
    if surface == "euclidean_ball":
        return 2 * (4 + R * R) / (r * (4 + z * z) ** 1.5)
    return 3 * r / (R * R)


# -- profile evolution ------------------------------------------------------------

@dataclass
class RotationalProfile:
    r_grid: np.ndarray
    f: np.ndarray
    time: float = 0.0

    @property
    def h(self) -> float:
        return float(self.r_grid[1] - self.r_grid[0])

    def derivatives(self) -> tuple[np.ndarray, np.ndarray]:
        """Centered ``f'`` and ``f''``; mirror node at the axis, one-sided at the outer end."""
        f, h = self.f, self.h
        fp = np.empty_like(f)
        fpp = np.empty_like(f)
        fp[1:-1] = (f[2:] - f[:-2]) / (2 * h)
        fpp[1:-1] = (f[2:] - 2 * f[1:-1] + f[:-2]) / (h * h)
        fp[0] = 0.0
        fpp[0] = 2 * (f[1] - f[0]) / (h * h)
        fp[-1] = (f[-1] - f[-2]) / h
        fpp[-1] = fpp[-2]
        return fp, fpp

    def velocity(self, tol: float = DENOM_TOL) -> np.ndarray:
        fp, fpp = self.derivatives()
        v = profile_velocity(fp, fpp, self.r_grid, tol)
        v[-1] = v[-2]
        return v

    def radius_at(self, level: float) -> float:
        """Smallest ``r`` with ``f(r) = level`` by linear interpolation (nan if none)."""
        d = self.f - level
        if d[0] == 0:
            return 0.0
        idx = np.nonzero(d[:-1] * d[1:] <= 0)[0]
        if idx.size == 0:
            return float("nan")
        i = idx[0]
        a, b = d[i], d[i + 1]
        frac = 0.0 if a == b else a / (a - b)
        return float(self.r_grid[i] + frac * self.h)


def _radial_grid(r_max: float, h: float) -> np.ndarray:
    n = int(round(r_max / h))
    if n < 2 or abs(n * h - r_max) > 1e-9 * max(1.0, r_max):
        raise ValueError("r_max must be a multiple of h with at least 2 cells")
    return h * np.arange(n + 1)


def evolve_profile(f0: Callable | Sequence[float] | np.ndarray, T: float, r_max: float | None = None,
                   h: float | None = None, r_grid: np.ndarray | None = None,
                   snap_times: Sequence[float] | None = None, dt_factor: float = 0.25,
                   tol: float = DENOM_TOL) -> list[RotationalProfile]:
    """Explicit time stepping of the rotational flow from ``t = 0`` to ``T``.

    ``f0`` is a callable of ``r`` or an array of node values.  The step is
    ``dt_factor * h^2 / max(1, max|f''|)``, recomputed every step and
    shortened to land on each snapshot time.
    """
    if not T > 0:
        raise ValueError("T must be positive")
    if r_grid is None:
        if r_max is None or h is None:
            raise ValueError("give r_grid or both r_max and h")
        r_grid = _radial_grid(r_max, h)
    r_grid = np.asarray(r_grid, dtype=float)
    f = np.asarray(f0(r_grid) if callable(f0) else f0, dtype=float).copy()
    if f.shape != r_grid.shape:
        raise ValueError("initial profile does not match the radial grid")
    hh = float(r_grid[1] - r_grid[0])
    marks = sorted({float(T)} | {float(s) for s in (snap_times or ()) if 0 < s < T})
    prof = RotationalProfile(r_grid, f, 0.0)
    out = [RotationalProfile(r_grid, f.copy(), 0.0)]
    t = 0.0
    for target in marks:
        while t < target:
            _, fpp = prof.derivatives()
            dt = dt_factor * hh * hh / max(1.0, float(np.max(np.abs(fpp))))
            if t + dt >= target - 1e-14 * max(1.0, target):
                dt = target - t
            prof.f = prof.f + dt * prof.velocity(tol)
            t = target if dt == target - t else t + dt
            if not np.all(np.isfinite(prof.f)):
                bad = int(np.argmax(~np.isfinite(prof.f)))
                raise ProfileBlowUpError(f"profile blew up at r={r_grid[bad]:.4g}, t={t:.4g}")
        prof.time = t
        out.append(RotationalProfile(r_grid, prof.f.copy(), t))
    return out
