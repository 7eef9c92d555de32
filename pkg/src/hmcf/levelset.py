"""Explicit finite-difference evolution of ``u_t = Delta_0 u - Delta_0,inf u``.

Three right-hand sides are available.  With ``p = Xu``, ``H`` the symmetrized
horizontal Hessian and the weight ``s = |p|^2 / (|p|^2 + eps^2)``:

* ``regularized``:    tr H - <H p, p>/(|p|^2+eps^2) - (1-s) tr H / m
* ``upper_envelope``: tr H - <H p, p>/(|p|^2+eps^2) - (1-s) lambda_min(H)
* ``lower_envelope``: tr H - <H p, p>/(|p|^2+eps^2) - (1-s) lambda_max(H)

Away from characteristic points ``s -> 1`` and all three reduce to the
curvature operator; at ``p = 0`` they give ``tr H - tr H/m``,
``tr H - lambda_min`` and ``tr H - lambda_max``.  Since
``lambda_min <= tr H/m <= lambda_max`` the envelopes bracket the regularized
value at every jet.  With ``eps = None`` the envelope branches use a hard
switch on ``|p| <= char_tol`` instead.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .calculus import ANALYTIC_CHAR_TOL, HorizontalJet, correction_matrix
from .geometry import VectorFieldFrame

__all__ = [
    "BRANCHES",
    "GridField",
    "SchemeParams",
    "GridBlowUpError",
    "EvolutionResult",
    "envelope_rhs",
    "rhs_from_arrays",
    "grid_from_function",
    "evolve",
    "zero_level_extract",
    "sym_eigvals",
]

BRANCHES = ("regularized", "upper_envelope", "lower_envelope")


class GridBlowUpError(FloatingPointError):
    def __init__(self, node, point, time: float):
        self.node = tuple(int(i) for i in node)
        self.point = np.asarray(point)
        self.time = float(time)
        super().__init__(f"non-finite value at node {self.node} (x={self.point.tolist()}) at t={self.time:.6g}")


@dataclass
class GridField:
    """Node values on a uniform axis-aligned grid; node ``i`` sits at ``lower + i*spacing``."""

    lower: np.ndarray
    spacing: np.ndarray
    values: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.spacing = np.asarray(self.spacing, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.lower.shape != self.spacing.shape or self.values.ndim != self.lower.size:
            raise ValueError("grid bounds, spacing and value array disagree in dimension")
        if np.any(self.spacing <= 0):
            raise ValueError("grid spacing must be positive")
        if any(s < 3 for s in self.values.shape):
            raise ValueError("need at least 3 nodes per axis")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid values must be finite")

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def upper(self) -> np.ndarray:
        return self.lower + self.spacing * (np.array(self.values.shape) - 1)

    def axes(self) -> list[np.ndarray]:
        return [self.lower[k] + self.spacing[k] * np.arange(s) for k, s in enumerate(self.values.shape)]

    def nodes(self) -> np.ndarray:
        """Node coordinates, shape ``values.shape + (n,)``."""
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    def with_values(self, values, time: float) -> "GridField":
        return GridField(self.lower.copy(), self.spacing.copy(), np.array(values, dtype=float), float(time))


def grid_from_function(fn, lower: Sequence[float], upper: Sequence[float], h: float | Sequence[float]) -> GridField:
    """Sample ``fn`` on the grid covering ``[lower, upper]`` with spacing ``h``."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    h = np.broadcast_to(np.asarray(h, dtype=float), lower.shape).copy()
    counts = np.rint((upper - lower) / h).astype(int) + 1
    if np.any(np.abs(lower + (counts - 1) * h - upper) > 1e-9 * np.maximum(1, np.abs(upper))):
        raise ValueError("box extent is not a multiple of the spacing")
    axes = [lower[k] + h[k] * np.arange(counts[k]) for k in range(lower.size)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return GridField(lower, h, np.asarray(fn(pts), dtype=float), 0.0)


@dataclass(frozen=True)
class SchemeParams:
    """``epsilon=None`` means the grid spacing (regularized branch) when evolving."""

    epsilon: float | None = None
    char_tol: float = ANALYTIC_CHAR_TOL
    cfl: float = 0.5
    branch: str = "regularized"

    def __post_init__(self):
        if self.branch not in BRANCHES:
            raise ValueError(f"unknown branch {self.branch!r}; expected one of {BRANCHES}")
        if not 0 < self.cfl < 1:
            raise ValueError("cfl must lie in (0, 1)")
        if self.epsilon is not None and self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.branch == "regularized" and self.epsilon is not None and self.epsilon == 0:
            raise ValueError("the regularized branch needs epsilon > 0")
        if self.char_tol <= 0:
            raise ValueError("char_tol must be positive")


def sym_eigvals(mat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(lambda_min, lambda_max) of a batch of symmetric matrices."""
    m = mat.shape[-1]
    if m == 1:
        return mat[..., 0, 0], mat[..., 0, 0]
    if m == 2:
        a, b, c = mat[..., 0, 0], mat[..., 0, 1], mat[..., 1, 1]
        mid = 0.5 * (a + c)
        rad = np.hypot(0.5 * (a - c), b)
        return mid - rad, mid + rad
    w = np.linalg.eigvalsh(mat)
    return w[..., 0], w[..., -1]


def _rhs_components(p, hh, branch: str, epsilon: float | None, char_tol: float):
    """Velocity from lists of components ``p[i]`` and ``hh[i][j]`` (arrays of equal shape)."""
    if branch not in BRANCHES:
        raise ValueError(f"unknown branch {branch!r}")
    m = len(p)
    tr = sum(hh[i][i] for i in range(m))
    p2 = sum(pi * pi for pi in p)
    quad = sum(hh[i][i] * p[i] * p[i] for i in range(m))
    for i in range(m):
        for j in range(i + 1, m):
            quad = quad + 2 * hh[i][j] * p[i] * p[j]

    def extremes():
        if m == 1:
            return hh[0][0], hh[0][0]
        if m == 2:
            mid = 0.5 * (hh[0][0] + hh[1][1])
            rad = np.hypot(0.5 * (hh[0][0] - hh[1][1]), hh[0][1])
            return mid - rad, mid + rad
        w = np.linalg.eigvalsh(np.stack([np.stack(row, axis=-1) for row in hh], axis=-2))
        return w[..., 0], w[..., -1]

    if epsilon is None:
        if branch == "regularized":
            raise ValueError("the regularized branch needs epsilon > 0")
        lam_min, lam_max = extremes()
        char = np.sqrt(p2) <= char_tol
        with np.errstate(invalid="ignore", divide="ignore"):
            base = tr - quad / p2
        alt = tr - (lam_min if branch == "upper_envelope" else lam_max)
        return np.where(char, alt, base)
    eps2 = float(epsilon) ** 2
    denom = p2 + eps2
    if branch == "regularized":
        shift = tr / m
    else:
        lam_min, lam_max = extremes()
        shift = lam_min if branch == "upper_envelope" else lam_max
    with np.errstate(invalid="ignore", divide="ignore"):
        out = tr - quad / denom - (eps2 / denom) * shift
    # epsilon = 0 with p = 0 leaves 0/0; fall back to the switch value
    return np.where(denom > 0, out, tr - shift)


def rhs_from_arrays(p: np.ndarray, hh: np.ndarray, branch: str, epsilon: float | None,
                    char_tol: float = ANALYTIC_CHAR_TOL) -> np.ndarray:
    """Level-set velocity from horizontal gradient ``p`` (..., m) and horizontal Hessian ``hh`` (..., m, m)."""
    p = np.asarray(p, dtype=float)
    hh = np.asarray(hh, dtype=float)
    m = p.shape[-1]
    return _rhs_components([p[..., i] for i in range(m)],
                           [[hh[..., i, j] for j in range(m)] for i in range(m)],
                           branch, epsilon, char_tol)


def envelope_rhs(j: HorizontalJet, branch: str, char_tol: float = ANALYTIC_CHAR_TOL,
                 epsilon: float | None = None) -> np.ndarray:
    """Level-set velocity at a jet for one of the three branches.

    Envelope branches with ``epsilon=None`` switch on ``|Xu| <= char_tol``;
    the regularized branch always needs ``epsilon > 0``.
    """
    return rhs_from_arrays(j.horiz_grad, j.horiz_hess, branch, epsilon, char_tol)


class _GridOperator:
    """Frame data sampled once on interior nodes plus the difference stencils.

    Everything is kept as per-component arrays (m, n <= 3 on grids), and
    identically zero coefficients are dropped from the sums.
    """

    def __init__(self, frame: VectorFieldFrame, grid: GridField):
        if grid.ndim != frame.n:
            raise ValueError(f"grid is {grid.ndim}-D but the frame lives in R^{frame.n}")
        self.shape = grid.values.shape
        self.h = grid.spacing
        self.n, self.m = frame.n, frame.m
        nodes = grid.nodes()
        self.interior = tuple(slice(1, s - 1) for s in self.shape)
        x_int = nodes[self.interior]
        sig = frame.sigma(x_int)
        self.sigma = [[self._compact(sig[..., i, k]) for k in range(self.n)] for i in range(self.m)]
        nab = frame.nabla(x_int)
        sym = 0.5 * (nab + np.swapaxes(nab, -2, -3))
        self.corr = [[[self._compact(sym[..., i, j, k]) for k in range(self.n)]
                      for j in range(self.m)] for i in range(self.m)]

        full_sigma = frame.sigma(nodes)
        sst = np.einsum("...ik,...jk->...ij", full_sigma, full_sigma)
        lam = np.linalg.eigvalsh(sst)[..., -1]
        first = float(np.max(np.sqrt(np.sum(sym ** 2, axis=(-1, -2, -3)))))
        self.s_max = float(np.max(lam)) + 0.5 * float(np.min(self.h)) * first
        scale = max(float(np.max(np.abs(full_sigma))), 1e-300)
        jump = max(float(np.max(np.abs(np.diff(full_sigma, axis=k)))) for k in range(grid.ndim))
        if jump > 0.25 * scale:
            warnings.warn(f"frame coefficients vary by {jump / scale:.2f} of their size across one cell; "
                          "refine the grid", stacklevel=3)

    @staticmethod
    def _compact(a: np.ndarray):
        """None for an all-zero coefficient, a float for a constant one, else the array."""
        if not np.any(a):
            return None
        first = a.flat[0]
        if np.all(a == first):
            return float(first)
        return a

    def _shift(self, u: np.ndarray, offsets) -> np.ndarray:
        return u[tuple(slice(1 + o, s - 1 + o) for o, s in zip(offsets, self.shape))]

    def derivatives(self, u: np.ndarray):
        n, h = self.n, self.h
        c = u[self.interior]
        zero = [0] * n
        du = [None] * n
        d2u = [[None] * n for _ in range(n)]
        for k in range(n):
            ek = list(zero)
            ek[k] = 1
            em = list(zero)
            em[k] = -1
            up, dn = self._shift(u, ek), self._shift(u, em)
            du[k] = (up - dn) / (2 * h[k])
            d2u[k][k] = (up - 2 * c + dn) / (h[k] * h[k])
            for l in range(k + 1, n):
                def at(a, b):
                    off = list(zero)
                    off[k], off[l] = a, b
                    return self._shift(u, off)

                v = (at(1, 1) - at(1, -1) - at(-1, 1) + at(-1, -1)) / (4 * h[k] * h[l])
                d2u[k][l] = d2u[l][k] = v
        return du, d2u

    @staticmethod
    def _dot(coeffs, vals, like):
        out = None
        for a, v in zip(coeffs, vals):
            if a is None:
                continue
            term = a * v
            out = term if out is None else out + term
        return np.zeros_like(like) if out is None else out

    def horizontal(self, u: np.ndarray):
        """Horizontal gradient and symmetrized horizontal Hessian as component lists."""
        du, d2u = self.derivatives(u)
        m, n = self.m, self.n
        like = du[0]
        p = [self._dot(self.sigma[i], du, like) for i in range(m)]
        # (D2u sigma^T)_{k j}
        ds = [[self._dot(self.sigma[j], d2u[k], like) for j in range(m)] for k in range(n)]
        hh = [[None] * m for _ in range(m)]
        for i in range(m):
            for j in range(i, m):
                v = self._dot(self.sigma[i], [ds[k][j] for k in range(n)], like)
                corr = self._dot(self.corr[i][j], du, like)
                hh[i][j] = hh[j][i] = v + corr
        return p, hh

    def rhs(self, u: np.ndarray, branch: str, epsilon: float | None, char_tol: float) -> np.ndarray:
        p, hh = self.horizontal(u)
        inner = _rhs_components(p, hh, branch, epsilon, char_tol)
        # boundary nodes carry the velocity of their nearest interior node
        return np.pad(inner, 1, mode="edge")


@dataclass
class EvolutionResult:
    snapshots: list[GridField]
    dt: float
    s_max: float
    n_steps: int
    params: SchemeParams
    meta: dict = field(default_factory=dict)

    @property
    def final(self) -> GridField:
        return self.snapshots[-1]


def _blowup(grid: GridField, values: np.ndarray, t: float) -> GridBlowUpError:
    bad = np.argwhere(~np.isfinite(values))[0]
    return GridBlowUpError(bad, grid.lower + bad * grid.spacing, t)


def evolve(frame: VectorFieldFrame, initial: GridField, T: float, params: SchemeParams | None = None,
           snap_times: Sequence[float] | None = None, snap_every: float | None = None) -> EvolutionResult:
    """Forward-Euler evolution to time ``initial.time + T``.

    Snapshots are taken at the requested absolute times (and always at the
    start and at the end); the step is shortened inside each interval so that
    every snapshot time is hit exactly.
    """
    params = params or SchemeParams()
    if not T > 0:
        raise ValueError("T must be positive")
    h_min = float(np.min(initial.spacing))
    eps = params.epsilon if params.epsilon is not None else h_min
    if eps == 0:
        eps = None
    op = _GridOperator(frame, initial)
    dt_max = params.cfl * h_min ** 2 / (2 * initial.ndim * op.s_max)

    t0 = initial.time
    t_end = t0 + T
    marks = {t_end}
    if snap_every is not None:
        if snap_every <= 0:
            raise ValueError("snap_every must be positive")
        k = 1
        while t0 + k * snap_every < t_end - 1e-12 * max(1.0, T):
            marks.add(t0 + k * snap_every)
            k += 1
    for s in snap_times or ():
        if t0 < s < t_end:
            marks.add(float(s))
    marks = sorted(marks)

    u = initial.values.copy()
    snaps = [initial.with_values(u, t0)]
    t = t0
    steps = 0
    for target in marks:
        span = target - t
        n = max(1, math.ceil(span / dt_max - 1e-9))
        dt = span / n
        for i in range(n):
            u = u + dt * op.rhs(u, params.branch, eps, params.char_tol)
            steps += 1
            if not np.all(np.isfinite(u)):
                raise _blowup(initial, u, t + (i + 1) * dt)
        t = target
        snaps.append(initial.with_values(u, t))
    return EvolutionResult(snaps, dt_max, op.s_max, steps, replace(params, epsilon=eps),
                           {"epsilon": eps, "dt_max": dt_max, "s_max": op.s_max, "n_steps": steps})


def zero_level_extract(gf: GridField) -> tuple[np.ndarray, bool]:
    """Zero crossings along grid edges by linear interpolation.

    Returns ``(points, empty)``; ``empty`` is True when the field has no
    sign change and no exact zeros.
    """
    u = gf.values
    nodes = gf.nodes()
    n = gf.ndim
    out = [nodes[u == 0]]
    for k in range(n):
        lo = tuple(slice(0, -1) if a == k else slice(None) for a in range(n))
        hi = tuple(slice(1, None) if a == k else slice(None) for a in range(n))
        ua, ub = u[lo], u[hi]
        mask = ua * ub < 0
        if not np.any(mask):
            continue
        a, b = ua[mask], ub[mask]
        frac = a / (a - b)
        pts = nodes[lo][mask].copy()
        pts[:, k] += frac * gf.spacing[k]
        out.append(pts)
    pts = np.concatenate(out, axis=0) if out else np.empty((0, n))
    return pts, pts.shape[0] == 0
