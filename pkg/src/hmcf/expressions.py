"""Arithmetic expression strings compiled to vectorized numpy callables.

Expressions are written over the variables ``x1 .. xn`` (or ``r`` for radial
profiles) with ``+ - * / ^``, ``sin``, ``cos``, ``tan``, ``exp``, ``log``,
``sqrt``, ``abs`` and the constants ``pi`` and ``e``.  Derivatives are taken
symbolically, so smooth expressions get exact gradients and Hessians.
"""
from __future__ import annotations

import re
from tokenize import TokenError
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import sympy as sp
from sympy.parsing.sympy_parser import convert_xor, parse_expr, standard_transformations

__all__ = [
    "ExpressionError",
    "CompiledExpression",
    "compile_expression",
    "compile_many",
    "variables_in",
    "lambdify_array",
]

_FUNCTIONS = {
    "sin": sp.sin,
    "cos": sp.cos,
    "tan": sp.tan,
    "exp": sp.exp,
    "log": sp.log,
    "sqrt": sp.sqrt,
    "abs": sp.Abs,
}
_CONSTANTS = {"pi": sp.pi, "e": sp.E}

_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\*\*|[-+*/^(),]))"
)
_VAR = re.compile(r"x([1-9][0-9]*)$")


class ExpressionError(ValueError):
    """Raised for malformed expressions; ``position`` is a 0-based offset."""

    def __init__(self, message: str, expr: str, position: int | None = None):
        self.expr = expr
        self.position = position
        where = "" if position is None else f" at position {position}"
        super().__init__(f"{message}{where} in {expr!r}")


def _tokenize(expr: str, allowed_vars: Callable[[str], bool]) -> list[str]:
    pos = 0
    names = []
    depth = 0
    while pos < len(expr):
        if expr[pos:].strip() == "":
            break
        m = _TOKEN.match(expr, pos)
        if m is None or m.end() == pos:
            start = pos + (len(expr[pos:]) - len(expr[pos:].lstrip()))
            raise ExpressionError(f"unexpected character {expr[start]!r}", expr, start)
        if m.group("name"):
            name = m.group("name")
            if name not in _FUNCTIONS and name not in _CONSTANTS and not allowed_vars(name):
                raise ExpressionError(f"unknown identifier {name!r}", expr, m.start("name"))
            names.append(name)
        op = m.group("op")
        if op == "(":
            depth += 1
        elif op == ")":
            depth -= 1
            if depth < 0:
                raise ExpressionError("unbalanced ')'", expr, m.start("op"))
        pos = m.end()
    if depth != 0:
        raise ExpressionError("unbalanced '('", expr, len(expr))
    return names


def variables_in(expr: str) -> int:
    """Largest variable index ``k`` such that ``xk`` appears in ``expr`` (0 if none)."""
    idx = [int(m.group(1)) for m in re.finditer(r"\bx([1-9][0-9]*)\b", expr)]
    return max(idx, default=0)


def _parse(expr: str, symbols: dict[str, sp.Symbol]) -> sp.Expr:
    local = dict(_FUNCTIONS)
    local.update(_CONSTANTS)
    local.update(symbols)
    try:
        out = parse_expr(
            expr,
            local_dict=local,
            global_dict={"Integer": sp.Integer, "Float": sp.Float, "Rational": sp.Rational,
                         "Symbol": sp.Symbol, "Function": sp.Function},
            transformations=standard_transformations + (convert_xor,),
            evaluate=True,
        )
    except (SyntaxError, TypeError, sp.SympifyError, TokenError) as exc:
        pos = getattr(exc, "offset", None)
        raise ExpressionError(f"cannot parse ({exc.__class__.__name__})", expr,
                              None if pos is None else max(pos - 1, 0)) from exc
    if not isinstance(out, sp.Expr):
        raise ExpressionError("expression does not evaluate to a scalar", expr)
    return out


def _vectorize(fn: Callable, nvar: int) -> Callable[[np.ndarray], np.ndarray]:
    def call(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        args = [x[..., k] for k in range(nvar)]
        with np.errstate(all="ignore"):
            out = fn(*args)
        return np.broadcast_to(np.asarray(out, dtype=float), x.shape[:-1]).copy()

    return call


@dataclass(frozen=True)
class CompiledExpression:
    """A parsed expression together with its symbolic derivatives.

    ``value``/``grad``/``hess`` take points of shape ``(..., n)`` and return
    arrays of shape ``(...)``, ``(..., n)`` and ``(..., n, n)``.
    """

    source: str
    expr: sp.Expr
    nvar: int
    smooth: bool
    value: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], np.ndarray]


def _symbols(n: int, radial: bool) -> list[sp.Symbol]:
    if radial:
        return [sp.Symbol("r", real=True)]
    return [sp.Symbol(f"x{k + 1}", real=True) for k in range(n)]


def compile_expression(expr: str, n: int | None = None, *, radial: bool = False) -> CompiledExpression:
    """Parse ``expr`` over ``x1..xn`` (or over ``r`` when ``radial``)."""
    if not isinstance(expr, str) or not expr.strip():
        raise ExpressionError("empty expression", str(expr), 0)
    if radial:
        n = 1
        allowed = lambda name: name == "r"  # noqa: E731
    else:
        used = variables_in(expr)
        n = used if n is None else n
        if used > n:
            raise ExpressionError(f"uses x{used} but dimension is {n}", expr)
        allowed = lambda name: bool(_VAR.match(name)) and int(name[1:]) <= max(n, 1)  # noqa: E731
    _tokenize(expr, allowed)
    syms = _symbols(n, radial)
    parsed = _parse(expr, {str(s): s for s in syms})
    smooth = not parsed.has(sp.Abs)

    grads = [sp.diff(parsed, s) for s in syms]
    hess = [[sp.diff(g, s) for s in syms] for g in grads]
    f_val = _vectorize(sp.lambdify(syms, parsed, "numpy"), n)
    f_grad = [_vectorize(sp.lambdify(syms, g, "numpy"), n) for g in grads]
    f_hess = [[_vectorize(sp.lambdify(syms, h, "numpy"), n) for h in row] for row in hess]

    def grad(x: np.ndarray) -> np.ndarray:
        return np.stack([g(x) for g in f_grad], axis=-1)

    def hessian(x: np.ndarray) -> np.ndarray:
        return np.stack([np.stack([h(x) for h in row], axis=-1) for row in f_hess], axis=-2)

    return CompiledExpression(expr, parsed, n, smooth, f_val, grad, hessian)


def compile_many(exprs: Sequence[str], n: int) -> list[sp.Expr]:
    """Parse several expressions over ``x1..xn`` and return the sympy objects."""
    syms = _symbols(n, False)
    out = []
    for e in exprs:
        e = str(e)
        _tokenize(e, lambda name: bool(_VAR.match(name)) and int(name[1:]) <= n)
        out.append(_parse(e, {str(s): s for s in syms}))
    return out


def lambdify_array(exprs, syms: Sequence[sp.Symbol]) -> Callable[[np.ndarray], np.ndarray]:
    """Vectorized evaluator for a nested list of sympy expressions.

    The result has shape ``batch + shape(exprs)``.
    """
    arr = np.array(exprs, dtype=object)
    fns = [_vectorize(sp.lambdify(list(syms), e, "numpy"), len(syms)) for e in arr.ravel()]
    shape = arr.shape

    def call(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.stack([f(x) for f in fns], axis=-1)
        return out.reshape(x.shape[:-1] + shape)

    return call
