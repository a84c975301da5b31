"""Normal forms for expression trees.

``canonicalize`` flattens sums and products, folds constants, merges like
terms and sorts operands, without distributing products over sums (except
a bare numeric factor, which is pushed into the sum).  ``extract_linear_coeffs``
goes further and expands everything into monomials.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Sequence

from .expr import Binary, Const, Expr, Unary, Var, to_string

__all__ = [
    "canonicalize", "canonical_string", "LinearCoeffs", "extract_linear_coeffs",
    "monomial_basis", "monomial_name",
]

CANON_DIGITS = 9


# --- normal form --------------------------------------------------------------
# A normal form is a Sum: a constant plus a map term_key -> (coef, factors).
# factors is a sorted tuple of (base_key, base, power) where base is
# ("var", i), ("exp", Sum) or ("sum", Sum).

@dataclass
class _Sum:
    const: float = 0.0
    terms: dict = field(default_factory=dict)

    def is_const(self):
        return not self.terms

    def single_term(self):
        """(coef, factors) when the sum is exactly one term with no constant."""
        if self.const == 0.0 and len(self.terms) == 1:
            return next(iter(self.terms.values()))
        return None

    def sort_key(self):
        return to_string(_build(self), digits=17)


def _base_key(base):
    kind, val = base
    if kind == "var":
        return (0, val, "")
    if kind == "lit":
        return (3, 0, to_string(val, digits=17))
    return (1 if kind == "exp" else 2, 0, val.sort_key())


def _term_key(factors):
    return tuple((fk, p) for fk, _, p in factors)


def _add_term(terms, coef, factors):
    if coef == 0.0:
        return
    key = _term_key(factors)
    if key in terms:
        c = terms[key][0] + coef
        if c == 0.0:
            del terms[key]
        else:
            terms[key] = (c, factors)
    else:
        terms[key] = (coef, factors)


def _const(c):
    return _Sum(float(c), {})


def _atom(base):
    s = _Sum()
    _add_term(s.terms, 1.0, ((_base_key(base), base, 1),))
    return s


def _add(a, b, sign=1.0):
    out = _Sum(a.const + sign * b.const, dict(a.terms))
    for coef, factors in b.terms.values():
        _add_term(out.terms, sign * coef, factors)
    return out


def _scale(a, c):
    if c == 0.0:
        return _Sum()
    out = _Sum(a.const * c, {})
    for coef, factors in a.terms.values():
        _add_term(out.terms, coef * c, factors)
    return out


def _merge_factors(fa, fb):
    powers = {}
    bases = {}
    for fk, base, p in (*fa, *fb):
        powers[fk] = powers.get(fk, 0) + p
        bases[fk] = base
    return tuple((fk, bases[fk], powers[fk]) for fk in sorted(powers) if powers[fk] != 0)


def _as_monomial(s):
    """(coef, factors) if ``s`` is a constant or a single term, else None."""
    if s.is_const():
        return s.const, ()
    return s.single_term()


def _sum_factor(s, power=1):
    """(scale, factor) with the sum rescaled so its first term has coefficient 1."""
    items = sorted(s.terms.items(), key=_term_sort_key)
    lead = items[0][1][0]
    s = _scale(s, 1.0 / lead)
    return lead ** power, (_base_key(("sum", s)), ("sum", s), power)


def _mul(a, b):
    ma, mb = _as_monomial(a), _as_monomial(b)
    if ma is not None and not ma[1]:
        return _scale(b, ma[0])
    if mb is not None and not mb[1]:
        return _scale(a, mb[0])
    if ma is None:
        ca, f = _sum_factor(a)
        fa = (f,)
    else:
        ca, fa = ma
    if mb is None:
        cb, f = _sum_factor(b)
        fb = (f,)
    else:
        cb, fb = mb
    return _monomial(ca * cb, _merge_factors(fa, fb))


def _monomial(coef, factors):
    if not factors:
        return _const(coef)
    # a lone sum factor to the first power is just that sum, scaled
    if len(factors) == 1 and factors[0][2] == 1 and factors[0][1][0] == "sum":
        return _scale(factors[0][1][1], coef)
    s = _Sum()
    _add_term(s.terms, coef, factors)
    return s


def _inv(b):
    m = _as_monomial(b)
    if m is not None:
        coef, factors = m
        if coef == 0.0:
            return None
        return _monomial(1.0 / coef, tuple((fk, base, -p) for fk, base, p in factors))
    scale, f = _sum_factor(b, -1)
    return _monomial(scale, (f,))


def _normal(e: Expr) -> _Sum:
    op = e.op
    if op == "const":
        return _const(e.value)
    if op == "var":
        return _atom(("var", e.value))
    if op == "exp":
        arg = _normal(e.args[0])
        if arg.is_const():
            return _const(math.exp(arg.const)) if arg.const <= 700 else _atom(("exp", arg))
        return _atom(("exp", arg))
    a, b = _normal(e.args[0]), _normal(e.args[1])
    if op == "+":
        return _add(a, b)
    if op == "-":
        return _add(a, b, -1.0)
    if op == "*":
        return _mul(a, b)
    inv = _inv(b)
    if inv is None:
        # division by an exact zero constant: keep the subtree verbatim
        return _atom(("lit", e))
    return _mul(a, inv)


# --- rebuild a tree -------------------------------------------------------------

def _base_tree(base) -> Expr:
    kind, val = base
    if kind == "var":
        return Var(val)
    if kind == "exp":
        return Unary("exp", _build(val))
    if kind == "lit":
        return val
    return _build(val)


def _product_tree(factors) -> Expr | None:
    out = None
    for _, base, p in factors:
        for _ in range(p):
            t = _base_tree(base)
            out = t if out is None else Binary("*", out, t)
    return out


def _term_tree(coef, factors) -> Expr:
    num = _product_tree([f for f in factors if f[2] > 0])
    den = _product_tree([(fk, b, -p) for fk, b, p in factors if p < 0])
    if coef != 1.0:
        num = Const(coef) if num is None else Binary("*", Const(coef), num)
    elif num is None:
        num = Const(1.0)
    return num if den is None else Binary("/", num, den)


def _term_sort_key(item):
    _, (coef, factors) = item
    degree = sum(p for _, _, p in factors if p > 0)
    return (degree, tuple((fk, p) for fk, _, p in factors))


def _build(s: _Sum) -> Expr:
    items = sorted(s.terms.items(), key=_term_sort_key)
    out = Const(s.const) if s.const != 0.0 or not items else None
    for _, (coef, factors) in items:
        if out is None:
            out = _term_tree(coef, factors)
        elif coef < 0:
            out = Binary("-", out, _term_tree(-coef, factors))
        else:
            out = Binary("+", out, _term_tree(coef, factors))
    return out


def canonicalize(expr: Expr, names: Sequence[str] | None = None) -> tuple[Expr, str]:
    """Normalised tree and its infix string (constants at 9 significant digits)."""
    tree = _build(_normal(expr))
    return tree, to_string(tree, names, digits=CANON_DIGITS)


def canonical_string(expr: Expr, names: Sequence[str] | None = None) -> str:
    return canonicalize(expr, names)[1]


# --- polynomial expansion --------------------------------------------------------

class _Unrepresentable(Exception):
    pass


def monomial_name(exponents: Sequence[int], names: Sequence[str]) -> str:
    parts = []
    for name, p in zip(names, exponents):
        if p == 1:
            parts.append(name)
        elif p:
            parts.append(f"{name}^{p}")
    return "*".join(parts) if parts else "1"


def monomial_basis(n_vars: int, degree: int = 2) -> list[tuple[int, ...]]:
    """All monomials of total degree <= ``degree`` (constant first)."""
    out = []
    for d in range(degree + 1):
        for combo in combinations_with_replacement(range(n_vars), d):
            e = [0] * n_vars
            for i in combo:
                e[i] += 1
            out.append(tuple(e))
    return out


@dataclass
class LinearCoeffs:
    coeffs: dict[str, float]
    residual: dict[str, float]
    representable: bool

    def present(self, tol: float = 1e-8) -> set[str]:
        return {k for k, v in self.coeffs.items() if abs(v) > tol}


def _poly(e: Expr, n: int, budget: int, names=None) -> dict:
    """Expansion as {(exponents, atoms): coef}; atoms are opaque strings."""
    op = e.op
    if op == "const":
        return {((0,) * n, ()): e.value} if e.value != 0 else {}
    if op == "var":
        ex = [0] * n
        ex[e.value] = 1
        return {(tuple(ex), ()): 1.0}
    if op == "exp":
        arg = _poly(e.args[0], n, budget, names)
        if not arg:
            return {((0,) * n, ()): 1.0}
        if len(arg) == 1 and next(iter(arg)) == ((0,) * n, ()):
            return {((0,) * n, ()): math.exp(next(iter(arg.values())))}
        return {((0,) * n, (canonical_string(e, names),)): 1.0}
    a = _poly(e.args[0], n, budget, names)
    b = _poly(e.args[1], n, budget, names)
    if op in "+-":
        out = dict(a)
        sign = 1.0 if op == "+" else -1.0
        for k, v in b.items():
            c = out.get(k, 0.0) + sign * v
            if c == 0.0:
                out.pop(k, None)
            else:
                out[k] = c
        return out
    if op == "/":
        if len(b) == 1:
            (bex, batoms), bc = next(iter(b.items()))
            if not batoms:
                # divide by a monomial: negative exponents stay representable
                b = {(tuple(-p for p in bex), ()): 1.0 / bc}
            else:
                b = {((0,) * n, (f"1/({canonical_string(e.args[1], names)})",)): 1.0}
        elif not b:
            raise _Unrepresentable("division by zero")
        else:
            b = {((0,) * n, (f"1/({canonical_string(e.args[1], names)})",)): 1.0}
    if len(a) * len(b) > budget:
        raise _Unrepresentable("expansion exceeds node budget")
    out: dict = {}
    for (ea, ta), ca in a.items():
        for (eb, tb), cb in b.items():
            k = (tuple(x + y for x, y in zip(ea, eb)), tuple(sorted(ta + tb)))
            c = out.get(k, 0.0) + ca * cb
            if c == 0.0:
                out.pop(k, None)
            else:
                out[k] = c
    if len(out) > budget:
        raise _Unrepresentable("expansion exceeds node budget")
    return out


def extract_linear_coeffs(expr: Expr, names: Sequence[str], basis=None,
                          budget: int = 10_000) -> LinearCoeffs:
    """Expand ``expr`` and read off one coefficient per basis monomial.

    ``basis`` is a list of exponent tuples (default: every monomial of
    degree <= 2).  Terms outside the basis land in ``residual`` and make
    ``representable`` false; so does an expansion larger than ``budget``.
    """
    n = len(names)
    basis = monomial_basis(n, 2) if basis is None else [tuple(b) for b in basis]
    coeffs = {monomial_name(b, names): 0.0 for b in basis}
    try:
        poly = _poly(expr, n, budget, names)
    except _Unrepresentable as exc:
        return LinearCoeffs(coeffs, {"<unexpanded>": math.nan, "reason": str(exc)}, False)
    wanted = set(basis)
    residual = {}
    for (ex, atoms), c in poly.items():
        if not atoms and ex in wanted:
            coeffs[monomial_name(ex, names)] = c
        else:
            name = _term_name(ex, atoms, names)
            residual[name] = residual.get(name, 0.0) + c
    return LinearCoeffs(coeffs, residual, not residual)


def _term_name(ex, atoms, names) -> str:
    parts = [nm if p == 1 else f"{nm}^{p}" for nm, p in zip(names, ex) if p]
    parts.extend(atoms)
    return "*".join(parts) or "1"
