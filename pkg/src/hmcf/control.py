"""Controlled horizontal Brownian motion and Monte Carlo value-function estimates.

Paths follow the Ito equation

    d xi = sqrt(2) sigma(xi)^T nu dW + sum_ij (nu^2)_ij nabla_{X_i} X_j (xi) dt

with projection controls ``nu = I - a a^T`` (so ``nu^2 = nu``), integrated by
Euler-Maruyama.  Every path owns a Philox stream keyed by ``(seed, path
index)``, so results do not depend on how paths are scheduled.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .calculus import ANALYTIC_CHAR_TOL, ScalarField, jet_from_derivatives
from .geometry import VectorFieldFrame

__all__ = [
    "ControlMatrix",
    "ConstantPolicy",
    "FeedbackPolicy",
    "CustomPolicy",
    "UnconstrainedPolicy",
    "PathEnsemble",
    "PathBlowUpError",
    "ValueEstimate",
    "direction_fan",
    "default_policy_family",
    "drift_vector",
    "step_ito",
    "path_rng",
    "simulate",
    "integrate_path",
    "estimate_vp",
    "estimate_v",
    "ess_sup",
    "feedback_optimal_control",
    "feedback_directions",
    "control_hamiltonian",
]

_SQRT2 = math.sqrt(2.0)


class PathBlowUpError(FloatingPointError):
    def __init__(self, path_index: int, time: float):
        self.path_index = int(path_index)
        self.time = float(time)
        super().__init__(f"path {self.path_index} left the finite range at t={self.time:.6g}")


@dataclass(frozen=True)
class ControlMatrix:
    """``nu = I - a a^T`` for a unit ``direction``; ``direction=None`` is the unconstrained ``nu = I``."""

    m: int
    direction: np.ndarray | None = None

    def __post_init__(self):
        if self.direction is not None:
            a = np.asarray(self.direction, dtype=float).reshape(-1)
            if a.size != self.m:
                raise ValueError(f"direction has {a.size} entries, expected {self.m}")
            if abs(np.linalg.norm(a) - 1) > 1e-12:
                raise ValueError("control direction must be a unit vector")
            object.__setattr__(self, "direction", a)

    @classmethod
    def from_vector(cls, v) -> "ControlMatrix":
        v = np.asarray(v, dtype=float).reshape(-1)
        nrm = np.linalg.norm(v)
        if nrm == 0:
            raise ValueError("cannot build a control from the zero vector")
        return cls(v.size, v / nrm)

    @classmethod
    def unconstrained(cls, m: int) -> "ControlMatrix":
        return cls(m, None)

    @property
    def admissible(self) -> bool:
        return self.direction is not None

    @property
    def nu(self) -> np.ndarray:
        eye = np.eye(self.m)
        if self.direction is None:
            return eye
        return eye - np.outer(self.direction, self.direction)

    @property
    def nu_squared(self) -> np.ndarray:
        nu = self.nu
        return nu @ nu


# -- controls as batches of directions ----------------------------------------------

def _nu_batch(directions: np.ndarray | None, m: int, batch: tuple) -> np.ndarray:
    if directions is None:
        return np.broadcast_to(np.eye(m), batch + (m, m))
    a = np.asarray(directions, dtype=float)
    return np.eye(m) - a[..., :, None] * a[..., None, :]


def _sign_normalize(v: np.ndarray) -> np.ndarray:
    """Flip rows so the first entry above 1e-12 in size is positive."""
    v = np.array(v, dtype=float)
    big = np.abs(v) > 1e-12
    first = np.argmax(big, axis=-1)
    lead = np.take_along_axis(v, first[..., None], axis=-1)[..., 0]
    return np.where((lead < 0)[..., None], -v, v)


def _top_eigvec(hh: np.ndarray, rel_tol: float = 1e-10) -> np.ndarray:
    """Unit eigenvector of the largest eigenvalue, with a deterministic choice on ties.

    In a repeated top eigenspace the first coordinate axis with a non-trivial
    projection onto it is used.
    """
    w, v = np.linalg.eigh(hh)
    m = hh.shape[-1]
    scale = np.maximum(np.max(np.abs(w), axis=-1), 1.0)
    top = w[..., -1]
    in_top = (top[..., None] - w) <= rel_tol * scale[..., None]
    out = v[..., :, -1].copy()
    tied = np.sum(in_top, axis=-1) > 1
    if np.any(tied):
        idx = np.nonzero(tied)
        basis = v[idx]
        mask = in_top[idx]
        proj = np.einsum("bij,bj,bkj->bik", basis, mask.astype(float), basis)
        choice = np.zeros((proj.shape[0], m))
        for b in range(proj.shape[0]):
            for k in range(m):
                col = proj[b, :, k]
                if np.linalg.norm(col) > 1e-8:
                    choice[b] = col / np.linalg.norm(col)
                    break
        out[idx] = choice
    return _sign_normalize(out)


def feedback_directions(frame: VectorFieldFrame, field: ScalarField, x, char_tol: float = ANALYTIC_CHAR_TOL,
                        du=None, d2u=None) -> np.ndarray:
    """``Xu/|Xu|`` where non-characteristic, else the top eigenvector of the horizontal Hessian."""
    x = np.asarray(x, dtype=float)
    du = field.grad(x) if du is None else du
    p = np.einsum("...ik,...k->...i", frame.sigma(x), du)
    norm = np.linalg.norm(p, axis=-1)
    char = norm <= char_tol
    out = np.empty(p.shape)
    ok = ~char
    out[ok] = p[ok] / norm[ok][..., None]
    if np.any(char):
        xc = x[char]
        hess = field.hess(xc) if d2u is None else d2u[char]
        j = jet_from_derivatives(frame, xc, du[char], hess)
        out[char] = _top_eigvec(j.horiz_hess)
    return out


def feedback_optimal_control(frame: VectorFieldFrame, field: ScalarField, t: float, x,
                             char_tol: float = ANALYTIC_CHAR_TOL) -> ControlMatrix:
    """Projection off the horizontal normal of ``field`` at one point."""
    a = feedback_directions(frame, field, np.asarray(x, dtype=float)[None, :], char_tol)[0]
    return ControlMatrix(frame.m, a / np.linalg.norm(a))


class ConstantPolicy:
    def __init__(self, direction, name: str | None = None):
        a = np.asarray(direction, dtype=float).reshape(-1)
        self.direction = a / np.linalg.norm(a)
        self.name = name or "constant(" + ",".join(f"{v:.4f}" for v in self.direction) + ")"

    def directions(self, t: float, x: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.direction, x.shape[:-1] + self.direction.shape)

    def control(self, t: float, x) -> ControlMatrix:
        return ControlMatrix(self.direction.size, self.direction)


class FeedbackPolicy:
    """Feedback projection built from a value surrogate.

    ``field`` is either a ScalarField used at all times or a callable
    ``t -> ScalarField``.  The frame is bound when simulating.
    """

    def __init__(self, field, char_tol: float = ANALYTIC_CHAR_TOL, name: str = "feedback"):
        self.field = field
        self.char_tol = char_tol
        self.name = name
        self.frame: VectorFieldFrame | None = None

    def bind(self, frame: VectorFieldFrame) -> "FeedbackPolicy":
        out = FeedbackPolicy(self.field, self.char_tol, self.name)
        out.frame = frame
        return out

    def _field_at(self, t: float) -> ScalarField:
        return self.field if isinstance(self.field, ScalarField) else self.field(t)

    def directions(self, t: float, x: np.ndarray) -> np.ndarray:
        if self.frame is None:
            raise RuntimeError("feedback policy is not bound to a frame")
        return feedback_directions(self.frame, self._field_at(t), x, self.char_tol)

    def control(self, t: float, x) -> ControlMatrix:
        a = self.directions(t, np.asarray(x, dtype=float)[None, :])[0]
        return ControlMatrix(a.size, a / np.linalg.norm(a))


class CustomPolicy:
    """Arbitrary map ``(t, x) -> ControlMatrix`` evaluated path by path."""

    def __init__(self, fn: Callable[[float, np.ndarray], ControlMatrix], name: str = "custom"):
        self.fn = fn
        self.name = name

    def directions(self, t: float, x: np.ndarray) -> np.ndarray:
        flat = x.reshape(-1, x.shape[-1])
        rows = []
        for xi in flat:
            c = self.fn(t, xi)
            if c.direction is None:
                raise ValueError("custom policy returned the unconstrained control")
            rows.append(c.direction)
        return np.asarray(rows).reshape(x.shape[:-1] + (-1,))

    def control(self, t: float, x) -> ControlMatrix:
        return self.fn(t, np.asarray(x, dtype=float))


class UnconstrainedPolicy:
    """Free horizontal Brownian motion (``nu = I``); not admissible for value functions."""

    name = "unconstrained"

    def directions(self, t: float, x: np.ndarray):
        return None

    def control(self, t: float, x) -> ControlMatrix:
        return ControlMatrix.unconstrained(len(np.asarray(x)))


def direction_fan(m: int, count: int = 32) -> np.ndarray:
    """Deterministic, well spread unit directions modulo sign (``a`` and ``-a`` give the same control)."""
    if m == 1:
        return np.ones((1, 1))
    k = np.arange(count)
    if m == 2:
        golden = math.pi * (3 - math.sqrt(5))
        th = np.mod(k * golden, math.pi)
        return np.stack([np.cos(th), np.sin(th)], axis=-1)
    if m == 3:
        # Fibonacci lattice on the upper hemisphere
        zc = 1 - (k + 0.5) / count
        rad = np.sqrt(1 - zc * zc)
        ph = k * math.pi * (3 - math.sqrt(5))
        return np.stack([rad * np.cos(ph), rad * np.sin(ph), zc], axis=-1)
    from scipy.stats import norm, qmc

    pts = qmc.Halton(d=m, scramble=False).random(count + 1)[1:]
    g = norm.ppf(pts)
    return _sign_normalize(g / np.linalg.norm(g, axis=-1, keepdims=True))


def default_policy_family(frame: VectorFieldFrame, field, char_tol: float = ANALYTIC_CHAR_TOL,
                          fan: int = 32) -> list:
    fam = [FeedbackPolicy(field, char_tol)]
    fam += [ConstantPolicy(a, name=f"fan[{i}]") for i, a in enumerate(direction_fan(frame.m, fan))]
    return fam


# -- dynamics ----------------------------------------------------------------------

def _drift(frame: VectorFieldFrame, nu: np.ndarray, x: np.ndarray) -> np.ndarray:
    nab = frame.nabla(x)
    sym = 0.5 * (nab + np.swapaxes(nab, -2, -3))
    return np.einsum("...ij,...ijk->...k", nu, sym)


def drift_vector(frame: VectorFieldFrame, nu: ControlMatrix | np.ndarray, x) -> np.ndarray:
    """``sum_ij (nu^2)_ij nabla_{X_i} X_j (x)``."""
    x = np.asarray(x, dtype=float)
    nu2 = nu.nu_squared if isinstance(nu, ControlMatrix) else np.asarray(nu) @ np.asarray(nu)
    return _drift(frame, nu2, x)


def step_ito(frame: VectorFieldFrame, x, nu: ControlMatrix, dt: float, dW) -> np.ndarray:
    """One Euler-Maruyama step of the controlled Ito equation."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    dW = np.asarray(dW, dtype=float)
    sig = frame.sigma(x)
    nu_m = nu.nu
    out = x + _SQRT2 * np.einsum("...ik,...i->...k", sig, nu_m @ dW) + drift_vector(frame, nu, x) * dt
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite state after Ito step")
    return out


def _advance(frame: VectorFieldFrame, x: np.ndarray, directions, dt: float, dW: np.ndarray,
             with_drift: bool) -> np.ndarray:
    sig = frame.sigma(x)
    m = frame.m
    if directions is None:
        noise = dW
        nu = None
    else:
        a = directions
        noise = dW - a * np.sum(a * dW, axis=-1, keepdims=True)
        nu = _nu_batch(a, m, x.shape[:-1])
    out = x + _SQRT2 * np.einsum("...ik,...i->...k", sig, noise)
    if with_drift:
        if nu is None:
            nu = _nu_batch(None, m, x.shape[:-1])
        out = out + _drift(frame, nu, x) * dt
    return out


def _has_drift(frame: VectorFieldFrame, probe: np.ndarray) -> bool:
    nab = frame.nabla(probe)
    return bool(np.any(np.abs(nab + np.swapaxes(nab, -2, -3)) > 0))


def path_rng(seed: int, path_index: int) -> np.random.Generator:
    """Counter-based stream for one path."""
    if not 0 <= seed < 2 ** 64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    return np.random.Generator(np.random.Philox(key=(int(seed) << 64) | int(path_index)))


def _time_steps(t0: float, T: float, dt: float) -> np.ndarray:
    if not T > t0:
        raise ValueError("need t0 < T")
    if not dt > 0:
        raise ValueError("dt must be positive")
    span = T - t0
    n_full = int(math.floor(span / dt * (1 + 1e-12)))
    steps = [dt] * n_full
    rest = span - n_full * dt
    if rest > 1e-12 * max(1.0, span):
        steps.append(rest)
    elif n_full == 0:
        steps.append(span)
    return np.asarray(steps)


@dataclass
class PathEnsemble:
    n_paths: int
    states: np.ndarray
    t: float
    dt: float
    seed: int
    policy: str = ""
    path_index: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.path_index is None:
            self.path_index = np.arange(self.n_paths)


def simulate(frame: VectorFieldFrame, x0, t0: float, T: float, policy, n_paths: int, dt: float,
             seed: int, *, workers: int = 1, chunk_steps: int = 256, block: int = 4096,
             record_every: int | None = None):
    """Advance ``n_paths`` copies of ``x0`` from ``t0`` to ``T`` under ``policy``.

    The last step is shortened so every path lands exactly on ``T``.  Paths
    are split into blocks that can run on worker threads; the outcome is
    identical for any ``workers``, ``block`` and ``chunk_steps``.  With
    ``record_every`` the states every that many steps are also returned.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (frame.n,):
        raise ValueError(f"x0 must have {frame.n} coordinates")
    steps = _time_steps(t0, T, dt)
    times = t0 + np.concatenate([[0.0], np.cumsum(steps)])
    times[-1] = T
    if isinstance(policy, FeedbackPolicy) and policy.frame is None:
        policy = policy.bind(frame)
    with_drift = _has_drift(frame, x0[None, :] + np.linspace(-1, 1, 7)[:, None])
    m = frame.m

    def run_block(lo: int, hi: int):
        gens = [path_rng(seed, i) for i in range(lo, hi)]
        x = np.broadcast_to(x0, (hi - lo, frame.n)).copy()
        rec = [x.copy()] if record_every else None
        for c0 in range(0, len(steps), chunk_steps):
            c1 = min(c0 + chunk_steps, len(steps))
            z = np.stack([g.standard_normal((c1 - c0, m)) for g in gens], axis=1)
            for s in range(c0, c1):
                h = steps[s]
                dirs = policy.directions(times[s], x)
                x = _advance(frame, x, dirs, h, math.sqrt(h) * z[s - c0], with_drift)
                if not np.all(np.isfinite(x)):
                    bad = lo + int(np.argmax(~np.all(np.isfinite(x), axis=-1)))
                    raise PathBlowUpError(bad, times[s + 1])
                if record_every and ((s + 1) % record_every == 0 or s + 1 == len(steps)):
                    rec.append(x.copy())
        return x, rec

    bounds = [(lo, min(lo + block, n_paths)) for lo in range(0, n_paths, block)]
    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda b: run_block(*b), bounds))
    else:
        parts = [run_block(*b) for b in bounds]
    states = np.concatenate([p[0] for p in parts], axis=0)
    ens = PathEnsemble(n_paths, states, float(T), float(dt), int(seed), getattr(policy, "name", ""))
    if record_every:
        rec = np.concatenate([np.stack(p[1], axis=0) for p in parts], axis=1)
        idx = [k for k in range(1, len(steps) + 1) if k % record_every == 0 or k == len(steps)]
        return ens, np.concatenate([[t0], times[idx]]), rec
    return ens


def integrate_path(frame: VectorFieldFrame, x0, increments: np.ndarray, dts: Sequence[float] | float,
                   policy=None, t0: float = 0.0) -> np.ndarray:
    """Deterministic Euler-Maruyama path driven by given Gaussian increments ``(steps, m)``.

    Returns all states, shape ``(steps + 1, n)``.
    """
    inc = np.asarray(increments, dtype=float)
    dts = np.broadcast_to(np.asarray(dts, dtype=float), (inc.shape[0],))
    policy = policy or UnconstrainedPolicy()
    if isinstance(policy, FeedbackPolicy) and policy.frame is None:
        policy = policy.bind(frame)
    x = np.asarray(x0, dtype=float)[None, :].copy()
    with_drift = _has_drift(frame, x)
    out = [x[0].copy()]
    t = t0
    for k in range(inc.shape[0]):
        dirs = policy.directions(t, x)
        x = _advance(frame, x, dirs, dts[k], inc[k][None, :], with_drift)
        t += dts[k]
        out.append(x[0].copy())
    return np.asarray(out)


# -- estimators ----------------------------------------------------------------------

def ess_sup(values: np.ndarray, mode: str | float = "max") -> float:
    """Sample maximum, or the ``q``-quantile taken as an actual sample value."""
    v = np.asarray(values, dtype=float)
    if mode == "max":
        return float(np.max(v))
    q = _quantile_level(mode)
    return float(np.quantile(v, q, method="higher"))


def _quantile_level(mode) -> float:
    if isinstance(mode, str):
        if not mode.startswith("quantile"):
            raise ValueError(f"unknown ess-sup mode {mode!r}")
        q = float(mode.split(":", 1)[1]) if ":" in mode else 0.999
    else:
        q = float(mode)
    if not 0 < q <= 1:
        raise ValueError("quantile level must lie in (0, 1]")
    return q


def _lp_mean(values: np.ndarray, p: float) -> float:
    """``(mean g^p)^(1/p)`` after shifting so that ``g >= 1``; the shift is undone on output."""
    g = np.asarray(values, dtype=float)
    if p < 1:
        raise ValueError("p must be >= 1")
    shift = max(0.0, 1.0 - float(np.min(g)))
    logs = np.log(g + shift)
    log_mean = logsumexp(p * logs) - math.log(g.size)
    return float(np.exp(log_mean / p) - shift)


@dataclass
class ValueEstimate:
    value: float
    stderr: float
    policy: str
    per_policy: dict = field(default_factory=dict)
    per_policy_stderr: dict = field(default_factory=dict)
    samples: dict = field(default_factory=dict)


def _terminal_samples(frame, x0, t0, T, g: ScalarField, policy, n_paths, dt, seed, workers):
    ens = simulate(frame, x0, t0, T, policy, n_paths, dt, seed, workers=workers)
    return g(ens.states)


def estimate_vp(frame: VectorFieldFrame, x0, t0: float, T: float, g: ScalarField, p: float | Sequence[float],
                policy, n_paths: int, dt: float, seed: int, workers: int = 1, samples: np.ndarray | None = None):
    """``L^p`` mean of the terminal cost over the paths of one policy.

    A sequence of ``p`` values reuses one sample and returns a list.
    """
    vals = samples if samples is not None else _terminal_samples(frame, x0, t0, T, g, policy, n_paths, dt,
                                                                  seed, workers)
    if np.ndim(p) == 0:
        return _lp_mean(vals, float(p))
    return [_lp_mean(vals, float(q)) for q in p]


def estimate_v(frame: VectorFieldFrame, x0, t0: float, T: float, g: ScalarField, policy_family=None,
               n_paths: int = 1000, dt: float = 1e-3, seed: int = 0, ess_sup_mode: str | float = "max",
               workers: int = 1, keep_samples: bool = False) -> ValueEstimate:
    """Minimum over a policy family of the essential-supremum estimate of ``g(xi_T)``.

    Every policy sees the same Gaussian increments.  The reported standard
    error is the sample standard deviation over ``sqrt(n_paths)`` of the
    winning policy.
    """
    if policy_family is None:
        policy_family = default_policy_family(frame, g)
    policy_family = list(policy_family)
    if not policy_family:
        raise ValueError("policy family is empty")
    per, err, keep = {}, {}, {}
    best = None
    for k, pol in enumerate(policy_family):
        name = getattr(pol, "name", f"policy[{k}]")
        vals = _terminal_samples(frame, x0, t0, T, g, pol, n_paths, dt, seed, workers)
        est = ess_sup(vals, ess_sup_mode)
        per[name] = est
        err[name] = float(np.std(vals, ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
        if keep_samples:
            keep[name] = vals
        if best is None or est < per[best]:
            best = name
    return ValueEstimate(per[best], err[best], best, per, err, keep)


def control_hamiltonian(frame: VectorFieldFrame, x, d, S) -> np.ndarray:
    """``-Tr(S~) + lambda_max(S~)`` with ``S~ = sigma S sigma^T + A(x, d)``."""
    x = np.asarray(x, dtype=float)
    d = np.asarray(d, dtype=float)
    S = np.asarray(S, dtype=float)
    S = 0.5 * (S + np.swapaxes(S, -1, -2))
    j = jet_from_derivatives(frame, x, d, S)
    st = j.horiz_hess
    lam = np.linalg.eigvalsh(st)[..., -1]
    return -np.trace(st, axis1=-2, axis2=-1) + lam
