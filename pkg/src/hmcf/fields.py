"""Field specifications: expression strings or named surfaces."""
from __future__ import annotations

import re
import warnings

import numpy as np

from .calculus import ScalarField
from .expressions import ExpressionError, compile_expression

__all__ = ["parse_field", "parse_profile", "NAMED_FIELDS"]

# named level-set functions in H^1 coordinates; {R} etc. are substituted
NAMED_FIELDS = {
    "koranyi_ball": ("(x1^2+x2^2)^2+16*x3^2-({R})^4", ("R",), (1.0,)),
    "euclidean_ball": ("x1^2+x2^2+x3^2-({R})^2", ("R",), (1.0,)),
    "plane": ("({a})*x1+({b})*x2-({d})", ("a", "b", "d"), (1.0, 2.0, 1.0)),
    "radial_cap": ("x3-(sqrt(1+x1^2+x2^2)-1)", (), ()),
    "paraboloid": ("x3-(x1^2+x2^2)/2", (), ()),
}
_NAMED = re.compile(r"^\s*([a-z_]+)\s*(?:\((.*)\))?\s*$")


def _expand_named(spec: str) -> str | None:
    m = _NAMED.match(spec)
    if not m or m.group(1) not in NAMED_FIELDS:
        return None
    template, names, defaults = NAMED_FIELDS[m.group(1)]
    args = [a.strip() for a in m.group(2).split(",")] if m.group(2) and m.group(2).strip() else []
    if len(args) > len(names):
        raise ExpressionError(f"{m.group(1)} takes at most {len(names)} parameters", spec)
    values = list(defaults)
    for k, a in enumerate(args):
        try:
            values[k] = float(a)
        except ValueError:
            raise ExpressionError(f"parameter {names[k]} is not a number", spec, spec.index(a)) from None
    return template.format(**{n: repr(v) for n, v in zip(names, values)})


def parse_field(spec: str, n: int | None = None, *, fd_step: float = 1e-5) -> ScalarField:
    """ScalarField from an expression over ``x1..xn`` or a named surface such as ``koranyi_ball(2)``.

    Smooth expressions get symbolic derivatives; ``abs`` switches to finite
    differences with a warning.
    """
    expanded = _expand_named(spec) or spec
    comp = compile_expression(expanded, n)
    if not comp.smooth:
        warnings.warn(f"{spec!r} is not smooth (abs); derivatives use finite differences", stacklevel=2)
        fld = ScalarField(comp.value, None, None, fd_step=fd_step, smooth=False, label=spec)
    else:
        fld = ScalarField(comp.value, comp.grad, comp.hess, fd_step=fd_step, label=spec)
    return fld


def parse_profile(spec: str):
    """Radial profile ``f(r)`` from an expression in ``r``; returns a vectorized callable."""
    comp = compile_expression(spec, radial=True)
    return lambda r: comp.value(np.asarray(r, dtype=float)[..., None])
