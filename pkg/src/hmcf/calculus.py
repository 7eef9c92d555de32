"""Pointwise horizontal differential operators.

Given a frame ``sigma`` and a level-set function ``u`` the horizontal jet
collects ``Xu = sigma Du``, the first-order correction
``A_ij = <nabla_{X_i}X_j + nabla_{X_j}X_i, Du> / 2`` and the symmetrized
horizontal Hessian ``(X^2 u)* = sigma D^2u sigma^T + A``.  Horizontal Laplacian,
infinity-Laplacian and mean curvature are read off the jet.  All routines
accept batches of points ``(..., n)``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .geometry import VectorFieldFrame

__all__ = [
    "CharacteristicPointError",
    "ScalarField",
    "HorizontalJet",
    "jet",
    "horizontal_laplacian",
    "horizontal_inf_laplacian",
    "horizontal_mean_curvature",
    "is_characteristic",
    "char_scan",
    "default_char_tol",
    "sphere_points",
    "cylinder_points",
    "torus_points",
]

ANALYTIC_CHAR_TOL = 1e-8
FD_CHAR_TOL = 1e-4


class CharacteristicPointError(ArithmeticError):
    """The horizontal gradient vanishes (to tolerance) where a direction is needed."""

    def __init__(self, norm, char_tol: float):
        self.horiz_grad_norm = np.asarray(norm)
        self.char_tol = char_tol
        worst = float(np.min(self.horiz_grad_norm))
        super().__init__(f"characteristic point: |Xu| = {worst:.3e} <= char_tol = {char_tol:.1e}")


@dataclass
class ScalarField:
    """Level-set function with optional analytic derivatives.

    Missing derivatives fall back to central differences of ``fn`` with step
    ``fd_step`` (gradient) and ``hess_step`` (Hessian).
    """

    fn: Callable[[np.ndarray], np.ndarray]
    grad_fn: Callable[[np.ndarray], np.ndarray] | None = None
    hess_fn: Callable[[np.ndarray], np.ndarray] | None = None
    fd_step: float = 1e-5
    hess_step: float = 1e-4
    smooth: bool = True
    label: str = ""

    @property
    def analytic(self) -> bool:
        return self.grad_fn is not None and self.hess_fn is not None

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.asarray(self.fn(x), dtype=float)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError(f"field {self.label or '<anonymous>'} is not finite at some points")
        return out

    def grad(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.grad_fn is not None:
            return np.asarray(self.grad_fn(x), dtype=float)
        return self.grad_fd(x)

    def hess(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.hess_fn is not None:
            h = np.asarray(self.hess_fn(x), dtype=float)
        else:
            h = self.hess_fd(x)
        return 0.5 * (h + np.swapaxes(h, -1, -2))

    def grad_fd(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        n, h = x.shape[-1], self.fd_step
        out = np.empty(x.shape)
        for k in range(n):
            e = np.zeros(n)
            e[k] = h
            out[..., k] = (self.fn(x + e) - self.fn(x - e)) / (2 * h)
        return out

    def hess_fd(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        n, h = x.shape[-1], self.hess_step
        f0 = self.fn(x)
        out = np.empty(x.shape + (n,))
        for k in range(n):
            ek = np.zeros(n)
            ek[k] = h
            out[..., k, k] = (self.fn(x + ek) - 2 * f0 + self.fn(x - ek)) / (h * h)
            for l in range(k + 1, n):
                el = np.zeros(n)
                el[l] = h
                v = (self.fn(x + ek + el) - self.fn(x + ek - el)
                     - self.fn(x - ek + el) + self.fn(x - ek - el)) / (4 * h * h)
                out[..., k, l] = out[..., l, k] = v
        return out

    def without_derivatives(self) -> "ScalarField":
        """Same field forced onto the finite-difference path."""
        return ScalarField(self.fn, None, None, self.fd_step, self.hess_step, self.smooth,
                           self.label + " [fd]")

    @classmethod
    def from_expression(cls, expr: str, n: int | None = None, **kw) -> "ScalarField":
        from .expressions import compile_expression

        comp = compile_expression(expr, n)
        if not comp.smooth:
            warnings.warn(f"{expr!r} contains abs(); using finite-difference derivatives",
                          stacklevel=2)
            return cls(comp.value, None, None, smooth=False, label=expr, **kw)
        return cls(comp.value, comp.grad, comp.hess, label=expr, **kw)


def default_char_tol(field: ScalarField) -> float:
    return ANALYTIC_CHAR_TOL if field.analytic else FD_CHAR_TOL


@dataclass(frozen=True)
class HorizontalJet:
    point: np.ndarray
    euclid_grad: np.ndarray
    horiz_grad: np.ndarray
    correction: np.ndarray
    horiz_hess: np.ndarray

    @property
    def horiz_grad_norm(self) -> np.ndarray:
        return np.linalg.norm(self.horiz_grad, axis=-1)

    @property
    def m(self) -> int:
        return self.horiz_grad.shape[-1]


def correction_matrix(nabla: np.ndarray, du: np.ndarray) -> np.ndarray:
    """``A_ij = <nabla_{X_i}X_j + nabla_{X_j}X_i, Du> / 2`` from a nabla tensor."""
    a = np.einsum("...ijk,...k->...ij", nabla, du)
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def jet_from_derivatives(frame: VectorFieldFrame, x, du, d2u) -> HorizontalJet:
    x = np.asarray(x, dtype=float)
    sig = frame.sigma(x)
    corr = correction_matrix(frame.nabla(x), du)
    xu = np.einsum("...ik,...k->...i", sig, du)
    shh = np.einsum("...ik,...kl,...jl->...ij", sig, d2u, sig)
    hh = shh + corr
    hh = 0.5 * (hh + np.swapaxes(hh, -1, -2))
    if not (np.all(np.isfinite(xu)) and np.all(np.isfinite(hh))):
        raise FloatingPointError("non-finite derivative values in horizontal jet")
    return HorizontalJet(x, np.asarray(du), xu, corr, hh)


def jet(frame: VectorFieldFrame, field: ScalarField, x) -> HorizontalJet:
    """Horizontal gradient, correction matrix and symmetrized horizontal Hessian at ``x``."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != frame.n:
        raise ValueError(f"points must have {frame.n} coordinates, got {x.shape[-1]}")
    return jet_from_derivatives(frame, x, field.grad(x), field.hess(x))


def horizontal_laplacian(j: HorizontalJet) -> np.ndarray:
    return np.trace(j.horiz_hess, axis1=-2, axis2=-1)


def horizontal_inf_laplacian(j: HorizontalJet, char_tol: float = ANALYTIC_CHAR_TOL) -> np.ndarray:
    norm = j.horiz_grad_norm
    bad = norm <= char_tol
    if np.any(bad):
        raise CharacteristicPointError(norm[bad], char_tol)
    q = j.horiz_grad / norm[..., None]
    return np.einsum("...i,...ij,...j->...", q, j.horiz_hess, q)


def horizontal_mean_curvature(frame: VectorFieldFrame, field: ScalarField, x,
                              char_tol: float | None = None) -> np.ndarray:
    """``k0 = (Delta_0 u - Delta_0,inf u) / |Xu|``, oriented by ``Xu / |Xu|``."""
    tol = default_char_tol(field) if char_tol is None else char_tol
    j = jet(frame, field, x)
    return (horizontal_laplacian(j) - horizontal_inf_laplacian(j, tol)) / j.horiz_grad_norm


def is_characteristic(j: HorizontalJet, char_tol: float = ANALYTIC_CHAR_TOL) -> np.ndarray:
    return j.horiz_grad_norm <= char_tol


def char_scan(frame: VectorFieldFrame, field: ScalarField, points,
              char_tol: float | None = None) -> np.ndarray:
    """The sample points at which ``|Xu| <= char_tol``; shape ``(k, n)``."""
    pts = np.asarray(points, dtype=float).reshape(-1, frame.n)
    if pts.shape[0] == 0:
        raise ValueError("char_scan needs at least one sample point")
    tol = default_char_tol(field) if char_tol is None else char_tol
    du = field.grad(pts)
    xu = np.einsum("...ik,...k->...i", frame.sigma(pts), du)
    return pts[np.linalg.norm(xu, axis=-1) <= tol]


# -- surface samplers for scans ----------------------------------------------

def sphere_points(radius: float = 1.0, n_theta: int = 64, n_phi: int = 64) -> np.ndarray:
    """Polar-angle grid including both poles."""
    th = np.linspace(0.0, np.pi, n_theta)
    ph = np.linspace(0.0, 2 * np.pi, n_phi, endpoint=False)
    T, P = np.meshgrid(th, ph, indexing="ij")
    pts = np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)], axis=-1)
    return radius * pts.reshape(-1, 3)


def cylinder_points(radius: float = 1.0, height: float = 2.0, n_z: int = 64, n_phi: int = 64) -> np.ndarray:
    z = np.linspace(-height / 2, height / 2, n_z)
    ph = np.linspace(0.0, 2 * np.pi, n_phi, endpoint=False)
    Z, P = np.meshgrid(z, ph, indexing="ij")
    return np.stack([radius * np.cos(P), radius * np.sin(P), Z], axis=-1).reshape(-1, 3)


def torus_points(major: float = 2.0, minor: float = 0.5, n_u: int = 64, n_v: int = 64) -> np.ndarray:
    u = np.linspace(0.0, 2 * np.pi, n_u, endpoint=False)
    v = np.linspace(0.0, 2 * np.pi, n_v, endpoint=False)
    U, V = np.meshgrid(u, v, indexing="ij")
    rad = major + minor * np.cos(V)
    return np.stack([rad * np.cos(U), rad * np.sin(U), minor * np.sin(V)], axis=-1).reshape(-1, 3)
