"""Sub-Riemannian frames, Lie brackets, the Hörmander step and the Heisenberg group.

A frame is an ``m x n`` coefficient matrix ``sigma(x)`` whose ``i``-th row is the
vector field ``X_i`` evaluated at ``x``.  Everything is vectorized over leading
batch axes: ``sigma(x)`` maps ``(..., n)`` to ``(..., m, n)`` and ``nabla(x)``
maps ``(..., n)`` to ``(..., m, m, n)`` with ``nabla(x)[..., i, j, :]`` the
Euclidean derivative of ``X_j`` along ``X_i``.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import sympy as sp

from .expressions import compile_many, lambdify_array

__all__ = [
    "GeometryError",
    "VectorFieldFrame",
    "HormanderResult",
    "make_geometry",
    "euclidean",
    "heisenberg",
    "grusin",
    "rototranslation",
    "frame_from_json",
    "lie_bracket",
    "hormander_step",
    "group_op",
    "inverse",
    "dilation",
    "homogeneous_norm",
    "left_translation_diff",
]

ArrayFn = Callable[[np.ndarray], np.ndarray]


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class VectorFieldFrame:
    ambient_dim: int
    horizontal_rank: int
    sigma_fn: ArrayFn
    nabla_fn: ArrayFn | None = None
    fd_step: float = 1e-5
    label: str = "custom"
    # True when every nabla_{X_i}X_j vanishes identically (Euclidean frames).
    flat: bool = field(default=False, compare=False)

    @property
    def n(self) -> int:
        return self.ambient_dim

    @property
    def m(self) -> int:
        return self.horizontal_rank

    def sigma(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.sigma_fn(x)

    def nabla(self, x) -> np.ndarray:
        """All ``nabla_{X_i} X_j`` at ``x``, shape ``(..., m, m, n)``."""
        x = np.asarray(x, dtype=float)
        if self.nabla_fn is not None:
            return self.nabla_fn(x)
        return self.nabla_fd(x)

    def nabla_fd(self, x) -> np.ndarray:
        """Central-difference ``nabla_{X_i}X_j = (X_j(x + h X_i) - X_j(x - h X_i)) / 2h``."""
        x = np.asarray(x, dtype=float)
        h = self.fd_step
        sig = self.sigma_fn(x)
        out = np.empty(x.shape[:-1] + (self.m, self.m, self.n))
        for i in range(self.m):
            step = h * sig[..., i, :]
            out[..., i, :, :] = (self.sigma_fn(x + step) - self.sigma_fn(x - step)) / (2 * h)
        return out

    def nabla_ij(self, i: int, j: int, x) -> np.ndarray:
        return self.nabla(x)[..., i, j, :]

    def field(self, i: int) -> ArrayFn:
        return lambda x: self.sigma(x)[..., i, :]

    def __repr__(self) -> str:
        return f"VectorFieldFrame({self.label!r}, n={self.n}, m={self.m})"


# -- built-in frames ---------------------------------------------------------

def euclidean(n: int = 3) -> VectorFieldFrame:
    n = int(n)
    if n < 1:
        raise GeometryError("euclidean dimension must be positive")
    eye = np.eye(n)

    def sigma(x):
        return np.broadcast_to(eye, x.shape[:-1] + (n, n)).copy()

    def nabla(x):
        return np.zeros(x.shape[:-1] + (n, n, n))

    return VectorFieldFrame(n, n, sigma, nabla, label=f"euclidean({n})", flat=True)


def heisenberg(k: int = 1) -> VectorFieldFrame:
    """H^k on R^(2k+1), coordinates (x_1..x_k, y_1..y_k, z).

    Rows are X_i = d/dx_i - (y_i/2) d/dz followed by Y_i = d/dy_i + (x_i/2) d/dz.
    """
    k = int(k)
    if k < 1:
        raise GeometryError("heisenberg index must be positive")
    n, m = 2 * k + 1, 2 * k

    def sigma(x):
        out = np.zeros(x.shape[:-1] + (m, n))
        for i in range(k):
            out[..., i, i] = 1.0
            out[..., i, n - 1] = -0.5 * x[..., k + i]
            out[..., k + i, k + i] = 1.0
            out[..., k + i, n - 1] = 0.5 * x[..., i]
        return out

    const = np.zeros((m, m, n))
    for i in range(k):
        const[i, k + i, n - 1] = 0.5    # nabla_{X_i} Y_i
        const[k + i, i, n - 1] = -0.5   # nabla_{Y_i} X_i

    def nabla(x):
        return np.broadcast_to(const, x.shape[:-1] + const.shape).copy()

    return VectorFieldFrame(n, m, sigma, nabla, label=f"heisenberg({k})")


def grusin() -> VectorFieldFrame:
    """X_1 = (1, 0), X_2 = (0, x); the rank drop at x = 0 is kept as a zero row."""

    def sigma(x):
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 0, 0] = 1.0
        out[..., 1, 1] = x[..., 0]
        return out

    def nabla(x):
        out = np.zeros(x.shape[:-1] + (2, 2, 2))
        out[..., 0, 1, 1] = 1.0   # nabla_{X_1} X_2
        return out

    return VectorFieldFrame(2, 2, sigma, nabla, label="grusin")


def rototranslation() -> VectorFieldFrame:
    """X_1 = (cos t, sin t, 0), X_2 = (0, 0, 1) on (x, y, t)."""

    def sigma(x):
        th = x[..., 2]
        out = np.zeros(x.shape[:-1] + (2, 3))
        out[..., 0, 0] = np.cos(th)
        out[..., 0, 1] = np.sin(th)
        out[..., 1, 2] = 1.0
        return out

    def nabla(x):
        th = x[..., 2]
        out = np.zeros(x.shape[:-1] + (2, 2, 3))
        out[..., 1, 0, 0] = -np.sin(th)   # nabla_{X_2} X_1
        out[..., 1, 0, 1] = np.cos(th)
        return out

    return VectorFieldFrame(3, 2, sigma, nabla, label="rototranslation")


_BUILTINS: dict[str, Callable[..., VectorFieldFrame]] = {
    "euclidean": euclidean,
    "heisenberg": heisenberg,
    "grusin": grusin,
    "rototranslation": rototranslation,
}

_NAME = re.compile(r"^\s*([a-z_]+)\s*(?:\(\s*(\d+)\s*\))?\s*$")


def frame_from_json(doc: Mapping | str | Path, *, label: str = "custom") -> VectorFieldFrame:
    """Build a frame from ``{"n":.., "m":.., "rows": [[expr, ...], ...]}``.

    Row entries are expression strings in ``x1..xn``.  ``nabla`` is derived
    symbolically.
    """
    if isinstance(doc, (str, Path)):
        doc = json.loads(Path(doc).read_text())
    try:
        n, m, rows = int(doc["n"]), int(doc["m"]), doc["rows"]
    except (KeyError, TypeError, ValueError) as exc:
        raise GeometryError(f"custom frame needs integer 'n', 'm' and 'rows': {exc}") from exc
    if len(rows) != m or any(len(r) != n for r in rows):
        raise GeometryError(f"'rows' must be {m} lists of {n} expressions")
    syms = [sp.Symbol(f"x{k + 1}", real=True) for k in range(n)]
    mat = [compile_many([str(e) for e in row], n) for row in rows]
    # nabla_{X_i} X_j = D X_j . X_i
    nab = [[[sum(sp.diff(mat[j][c], syms[k]) * mat[i][k] for k in range(n)) for c in range(n)]
            for j in range(m)] for i in range(m)]
    sigma = lambdify_array(mat, syms)
    nabla = lambdify_array(nab, syms)
    return VectorFieldFrame(n, m, sigma, nabla, label=doc.get("label", label))


def make_geometry(spec, *, probe=None, fd_step: float = 1e-5) -> VectorFieldFrame:
    """Resolve a geometry spec into a frame.

    ``spec`` is a built-in name (``"heisenberg"``, ``"heisenberg(2)"``,
    ``"euclidean(3)"``, ``"grusin"``, ``"rototranslation"``), a path to a JSON
    frame document, a JSON mapping with expression rows, or a mapping with
    callables ``{"sigma": f, "nabla": g (optional), "n": n, "m": m}``.
    """
    if isinstance(spec, VectorFieldFrame):
        frame = spec
    elif isinstance(spec, Mapping) and callable(spec.get("sigma")):
        n, m = int(spec["n"]), int(spec["m"])
        frame = VectorFieldFrame(n, m, spec["sigma"], spec.get("nabla"),
                                 fd_step=float(spec.get("fd_step", fd_step)),
                                 label=str(spec.get("label", "custom")))
    elif isinstance(spec, Mapping):
        frame = frame_from_json(spec)
    elif isinstance(spec, (str, Path)) and (Path(spec).suffix == ".json" or Path(spec).is_file()):
        frame = frame_from_json(spec, label=Path(spec).stem)
    elif isinstance(spec, str):
        match = _NAME.match(spec)
        if match is None or match.group(1) not in _BUILTINS:
            raise GeometryError(f"unknown geometry {spec!r}; choose from {sorted(_BUILTINS)}")
        name, arg = match.groups()
        if name in ("grusin", "rototranslation"):
            if arg is not None:
                raise GeometryError(f"{name} takes no parameter")
            frame = _BUILTINS[name]()
        else:
            frame = _BUILTINS[name](int(arg) if arg else (1 if name == "heisenberg" else 3))
    else:
        raise GeometryError(f"cannot build a geometry from {type(spec).__name__}")

    if frame.m > frame.n:
        raise GeometryError(f"horizontal rank m={frame.m} exceeds dimension n={frame.n}")
    if frame.m < 1:
        raise GeometryError("horizontal rank must be positive")
    x = np.full(frame.n, 0.3) if probe is None else np.asarray(probe, dtype=float)
    sig = frame.sigma(x)
    if sig.shape != (frame.m, frame.n):
        raise GeometryError(f"sigma returned shape {sig.shape}, expected {(frame.m, frame.n)}")
    if not np.all(np.isfinite(sig)):
        raise GeometryError(f"sigma is not finite at probe point {x.tolist()}")
    return frame


# -- brackets and the Hörmander condition ------------------------------------

def lie_bracket(frame: VectorFieldFrame, i: int, j: int, x) -> np.ndarray:
    """``[X_i, X_j](x) = nabla_{X_i}X_j - nabla_{X_j}X_i`` (0-based indices)."""
    if not (0 <= i < frame.m and 0 <= j < frame.m):
        raise IndexError(f"bracket indices must lie in [0, {frame.m})")
    nab = frame.nabla(x)
    out = nab[..., i, j, :] - nab[..., j, i, :]
    if not np.all(np.isfinite(out)):
        raise GeometryError("non-finite frame derivative")
    return out


def _jacobian(f: ArrayFn, x: np.ndarray, h: float) -> np.ndarray:
    n = x.shape[-1]
    cols = []
    for k in range(n):
        e = np.zeros(n)
        e[k] = h
        cols.append((f(x + e) - f(x - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def _bracket_fn(v: ArrayFn, w: ArrayFn, h: float) -> ArrayFn:
    def fn(x):
        return _jacobian(w, x, h) @ v(x) - _jacobian(v, x, h) @ w(x)

    return fn


@dataclass(frozen=True)
class HormanderResult:
    satisfied: bool
    step: int
    singular_values: tuple[float, ...] = ()
    diagnostic: str = ""


def hormander_step(frame: VectorFieldFrame, x, max_step: int = 4, *,
                   rel_tol: float = 1e-8, ambiguity: float = 100.0) -> HormanderResult:
    """Smallest bracket depth at which the iterated brackets span R^n at ``x``.

    Depth-2 brackets use the frame's ``nabla``; deeper ones nest central
    differences.  A span whose smallest relevant singular value lies within
    ``ambiguity * rel_tol`` of the cutoff is reported as inconclusive.
    """
    if max_step < 1:
        raise ValueError("max_step must be >= 1")
    x = np.asarray(x, dtype=float)
    n, m = frame.n, frame.m
    h = max(frame.fd_step * 10, 1e-4)
    layer: list[ArrayFn] = [frame.field(i) for i in range(m)]
    vectors = [frame.sigma(x)[i] for i in range(m)]
    first = list(layer)
    for step in range(1, max_step + 1):
        if step == 2:
            nab = frame.nabla(x)
            layer = []
            for i in range(m):
                for j in range(i + 1, m):
                    layer.append(_bracket_fn(first[i], first[j], h))
                    vectors.append(nab[i, j] - nab[j, i])
        elif step > 2:
            prev = layer
            layer = [_bracket_fn(v, w, h) for v in first for w in prev]
            vectors.extend(f(x) for f in layer)
        span = np.array(vectors, dtype=float)
        if not np.all(np.isfinite(span)):
            return HormanderResult(False, step, (), "non-finite bracket values")
        sv = np.linalg.svd(span, compute_uv=False)
        smax = sv[0] if sv.size else 0.0
        if smax == 0.0:
            continue
        if sv.size >= n:
            ratio = sv[n - 1] / smax
            if ratio > rel_tol * ambiguity:
                return HormanderResult(True, step, tuple(sv[:n]))
            if ratio > rel_tol:
                return HormanderResult(
                    False, step, tuple(sv[:n]),
                    f"inconclusive rank test: condition number {1 / ratio:.3e} near the cutoff",
                )
    rank = int(np.sum(sv > rel_tol * sv[0])) if sv.size and sv[0] > 0 else 0
    return HormanderResult(False, max_step, tuple(sv[:n]) if sv.size else (),
                           f"span has rank {rank} < {n} after {max_step} bracket levels")


# -- Heisenberg group H^k ----------------------------------------------------

def _split(p: np.ndarray):
    k = (p.shape[-1] - 1) // 2
    if p.shape[-1] != 2 * k + 1 or k < 1:
        raise GeometryError("Heisenberg points have odd dimension 2k+1 >= 3")
    return p[..., :k], p[..., k:2 * k], p[..., -1]


def group_op(p, q) -> np.ndarray:
    """(x, y, z) . (x', y', z') = (x + x', y + y', z + z' + (x.y' - y.x') / 2)."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    x, y, z = _split(p)
    x2, y2, z2 = _split(q)
    zz = z + z2 + 0.5 * (np.sum(x * y2, axis=-1) - np.sum(y * x2, axis=-1))
    return np.concatenate([x + x2, y + y2, zz[..., None]], axis=-1)


def inverse(p) -> np.ndarray:
    return -np.asarray(p, dtype=float)


def dilation(lam: float, p) -> np.ndarray:
    if not lam > 0:
        raise GeometryError("dilation factor must be positive")
    p = np.array(p, dtype=float)
    p[..., :-1] *= lam
    p[..., -1] *= lam * lam
    return p


def homogeneous_norm(p) -> np.ndarray:
    """((|x|^2 + |y|^2)^2 + z^2)^(1/4)."""
    x, y, z = _split(np.asarray(p, dtype=float))
    h2 = np.sum(x * x, axis=-1) + np.sum(y * y, axis=-1)
    return (h2 * h2 + z * z) ** 0.25


def left_translation_diff(a) -> np.ndarray:
    """Differential of q -> a . q (constant in q)."""
    a = np.asarray(a, dtype=float)
    x, y, _ = _split(a)
    n = a.shape[-1]
    k = (n - 1) // 2
    out = np.broadcast_to(np.eye(n), a.shape[:-1] + (n, n)).copy()
    out[..., -1, :k] = -0.5 * y
    out[..., -1, k:2 * k] = 0.5 * x
    return out
