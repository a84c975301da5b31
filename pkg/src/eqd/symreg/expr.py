"""Expression trees over state variables, constants, ``exp`` and + - * /."""
from __future__ import annotations

import math
import re
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Expr", "Var", "Const", "Unary", "Binary", "exp", "BINARY_OPS", "UNARY_OPS",
    "eval_expr", "to_string", "nodes", "replace_at", "constants", "with_constants",
    "DIV_EPS", "EXP_MAX", "to_callable", "compile_vectorized", "parse_expr",
]

BINARY_OPS = ("+", "-", "*", "/")
UNARY_OPS = ("exp",)

# Guards: a denominator this small or an exp argument this large poisons the
# whole expression rather than being patched with a substitute value.
DIV_EPS = 1e-12
EXP_MAX = 700.0


class Expr:
    """Immutable expression node.

    ``op`` is ``"var"`` (``value`` = input column), ``"const"`` (``value`` =
    number), ``"exp"`` or one of ``+ - * /``.  ``size`` is the node count,
    which doubles as the complexity measure.
    """

    __slots__ = ("op", "value", "args", "size", "_key")

    def __init__(self, op: str, value=None, args: tuple = ()):
        self.op = op
        self.value = value
        self.args = args
        self.size = 1 + sum(a.size for a in args)
        self._key = None

    # structural identity ------------------------------------------------
    def key(self):
        k = self._key
        if k is None:
            if self.op == "var":
                k = ("v", self.value)
            elif self.op == "const":
                k = ("c", self.value)
            else:
                k = (self.op, *(a.key() for a in self.args))
            self._key = k
        return k

    def __eq__(self, other):
        return isinstance(other, Expr) and self.key() == other.key()

    def __hash__(self):
        return hash(self.key())

    def __repr__(self):
        return f"Expr({to_string(self)!r})"

    def __str__(self):
        return to_string(self)

    @property
    def complexity(self) -> int:
        return self.size

    @property
    def is_leaf(self) -> bool:
        return not self.args

    # construction sugar -------------------------------------------------
    def __add__(self, other):
        return Binary("+", self, _lift(other))

    def __radd__(self, other):
        return Binary("+", _lift(other), self)

    def __sub__(self, other):
        return Binary("-", self, _lift(other))

    def __rsub__(self, other):
        return Binary("-", _lift(other), self)

    def __mul__(self, other):
        return Binary("*", self, _lift(other))

    def __rmul__(self, other):
        return Binary("*", _lift(other), self)

    def __truediv__(self, other):
        return Binary("/", self, _lift(other))

    def __rtruediv__(self, other):
        return Binary("/", _lift(other), self)

    def __neg__(self):
        return Binary("*", Const(-1.0), self)

    def __reduce__(self):
        return (Expr, (self.op, self.value, self.args))


def _lift(v) -> Expr:
    return v if isinstance(v, Expr) else Const(v)


def Var(index: int) -> Expr:
    if index < 0:
        raise ValueError("variable index must be non-negative")
    return Expr("var", int(index))


def Const(value: float) -> Expr:
    return Expr("const", float(value))


def Unary(op: str, child: Expr) -> Expr:
    if op not in UNARY_OPS:
        raise ValueError(f"unknown unary operator {op!r}")
    return Expr(op, None, (child,))


def Binary(op: str, left: Expr, right: Expr) -> Expr:
    if op not in BINARY_OPS:
        raise ValueError(f"unknown binary operator {op!r}")
    return Expr(op, None, (left, right))


def exp(child: Expr) -> Expr:
    return Unary("exp", _lift(child))


# evaluation -----------------------------------------------------------------

class _Poison(Exception):
    pass


def _ev(e: Expr, X: np.ndarray):
    op = e.op
    if op == "var":
        return X[:, e.value]
    if op == "const":
        return e.value
    if op == "exp":
        a = _ev(e.args[0], X)
        if np.any(a > EXP_MAX):
            raise _Poison
        return np.exp(a)
    a = _ev(e.args[0], X)
    b = _ev(e.args[1], X)
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if np.any(np.abs(b) < DIV_EPS):
        raise _Poison
    return a / b


def eval_expr(expr: Expr, inputs) -> np.ndarray:
    """Evaluate on every row of ``inputs`` (n_samples x n_vars).

    A guarded division or exp overflow returns an all-NaN vector, which the
    search treats as infinite error.
    """
    X = np.asarray(inputs, dtype=float)
    if X.ndim != 2:
        raise ValueError("inputs must be a 2-D array")
    for node in nodes(expr):
        if node.op == "var" and node.value >= X.shape[1]:
            raise ValueError(f"variable index {node.value} >= n_vars {X.shape[1]}")
    return _eval_unchecked(expr, X)


def _eval_unchecked(expr: Expr, X: np.ndarray) -> np.ndarray:
    try:
        with np.errstate(all="ignore"):
            out = _ev(expr, X)
    except _Poison:
        return np.full(X.shape[0], np.nan)
    if np.ndim(out) == 0:
        return np.full(X.shape[0], float(out))
    return out


# printing -------------------------------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _fmt_const(v: float, digits: int | None) -> str:
    if digits is None:
        s = repr(float(v))
        return s[:-2] if s.endswith(".0") else s
    return format(v, f".{digits}g")


def to_string(expr: Expr, names: Sequence[str] | None = None, digits: int | None = None) -> str:
    """Infix form with the minimum parentheses needed to parse back."""
    return _str(expr, names, digits, leading=True)


def _name(i: int, names) -> str:
    if names is not None and i < len(names):
        return names[i]
    return f"x{i}"


def _str(e: Expr, names, digits, leading: bool) -> str:
    op = e.op
    if op == "var":
        return _name(e.value, names)
    if op == "const":
        s = _fmt_const(e.value, digits)
        return s if (leading or not s.startswith("-")) else f"({s})"
    if op == "exp":
        return f"exp({_str(e.args[0], names, digits, True)})"
    left, right = e.args
    p = _PREC[op]
    ls = _str(left, names, digits, leading)
    if left.op in _PREC and _PREC[left.op] < p:
        ls = f"({_str(left, names, digits, True)})"
    rs = _str(right, names, digits, False)
    if right.op in _PREC and (_PREC[right.op] < p or (_PREC[right.op] == p and op in "-/")):
        rs = f"({_str(right, names, digits, True)})"
    sep = f" {op} " if p == 1 else op
    return f"{ls}{sep}{rs}"


# tree surgery ---------------------------------------------------------------

def nodes(expr: Expr) -> list[Expr]:
    """All nodes in pre-order."""
    out = []
    stack = [expr]
    while stack:
        e = stack.pop()
        out.append(e)
        stack.extend(reversed(e.args))
    return out


def replace_at(expr: Expr, index: int, new: Expr) -> Expr:
    """Copy of ``expr`` with the pre-order node ``index`` replaced by ``new``."""
    if index == 0:
        return new
    pos = 1
    args = list(expr.args)
    for i, a in enumerate(args):
        if index < pos + a.size:
            args[i] = replace_at(a, index - pos, new)
            return Expr(expr.op, expr.value, tuple(args))
        pos += a.size
    raise IndexError(index)


def constants(expr: Expr) -> list[float]:
    return [n.value for n in nodes(expr) if n.op == "const"]


def with_constants(expr: Expr, values: Sequence[float]) -> Expr:
    """Copy of ``expr`` with its constants (pre-order) set to ``values``."""
    it = iter(values)

    def rebuild(e):
        if e.op == "const":
            return Const(next(it))
        if not e.args:
            return e
        return Expr(e.op, e.value, tuple(rebuild(a) for a in e.args))

    return rebuild(expr)


def to_callable(expr: Expr) -> Callable[[np.ndarray], float]:
    """Scalar evaluator for one state vector, compiled to a Python lambda."""
    src = _py(expr)
    code = compile(f"lambda u: {src}", "<expr>", "eval")
    return eval(code, {"_exp": math.exp})


def _py(e: Expr) -> str:
    if e.op == "var":
        return f"u[{e.value}]"
    if e.op == "const":
        return repr(e.value)
    if e.op == "exp":
        return f"_exp({_py(e.args[0])})"
    return f"({_py(e.args[0])} {e.op} {_py(e.args[1])})"


def _guard_div(a, b):
    if np.any(np.abs(b) < DIV_EPS):
        raise _Poison
    return a / b


def _guard_exp(a):
    if np.any(a > EXP_MAX):
        raise _Poison
    return np.exp(a)


def compile_vectorized(expr: Expr) -> Callable[[np.ndarray, Sequence[float]], np.ndarray]:
    """``f(X, c)`` evaluating ``expr`` on rows of X with its constants taken from ``c``.

    Constants are numbered in pre-order, as in :func:`constants`.  The
    guards match :func:`eval_expr`: a poisoned evaluation returns all NaN.
    """
    counter = iter(range(expr.size))

    def src(e):
        if e.op == "var":
            return f"X[:, {e.value}]"
        if e.op == "const":
            return f"c[{next(counter)}]"
        if e.op == "exp":
            return f"_exp({src(e.args[0])})"
        a = src(e.args[0])
        b = src(e.args[1])
        if e.op == "/":
            return f"_div({a}, {b})"
        return f"({a} {e.op} {b})"

    code = compile(f"lambda X, c: {src(expr)}", "<expr>", "eval")
    raw = eval(code, {"_exp": _guard_exp, "_div": _guard_div})

    def f(X, c):
        try:
            with np.errstate(all="ignore"):
                out = raw(X, c)
        except _Poison:
            return np.full(X.shape[0], np.nan)
        if np.ndim(out) == 0:
            return np.full(X.shape[0], float(out))
        return out

    return f


_TOKEN = re.compile(r"\s*(?:(\d+\.?\d*(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?)|([A-Za-z_]\w*)|(\S))")


def parse_expr(text: str, names: Sequence[str],
               symbols: dict[str, float] | None = None) -> Expr:
    """Parse infix text such as ``"-c*y + d*x*y"`` into a tree.

    ``names`` map to variables by position; ``symbols`` are substituted as
    constants.  Unary minus becomes multiplication by -1.
    """
    symbols = symbols or {}
    tokens = []
    pos = 0
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            break
        num, ident, other = m.groups()
        tokens.append(("num", float(num)) if num else ("id", ident) if ident else ("op", other))
        pos = m.end()
    tokens.append(("end", None))
    index = {n: i for i, n in enumerate(names)}
    i = 0

    def peek():
        return tokens[i]

    def take(kind=None, value=None):
        nonlocal i
        tok = tokens[i]
        if (kind and tok[0] != kind) or (value and tok[1] != value):
            raise ValueError(f"unexpected token {tok[1]!r} in {text!r}")
        i += 1
        return tok

    def sum_():
        e = product()
        while peek() in (("op", "+"), ("op", "-")):
            op = take()[1]
            e = Binary(op, e, product())
        return e

    def product():
        e = unary()
        while peek() in (("op", "*"), ("op", "/")):
            op = take()[1]
            e = Binary(op, e, unary())
        return e

    def unary():
        if peek() == ("op", "-"):
            take()
            inner = unary()
            if inner.op == "const":
                return Const(-inner.value)
            return Binary("*", Const(-1.0), inner)
        if peek() == ("op", "+"):
            take()
            return unary()
        return atom()

    def atom():
        kind, val = peek()
        if kind == "num":
            take()
            return Const(val)
        if kind == "id":
            take()
            if val == "exp":
                take("op", "(")
                e = sum_()
                take("op", ")")
                return Unary("exp", e)
            if val in index:
                return Var(index[val])
            if val in symbols:
                return Const(float(symbols[val]))
            raise ValueError(f"unknown name {val!r} in {text!r}")
        if (kind, val) == ("op", "("):
            take()
            e = sum_()
            take("op", ")")
            return e
        raise ValueError(f"unexpected token {val!r} in {text!r}")

    out = sum_()
    take("end")
    return out
