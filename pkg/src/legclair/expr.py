"""Scalar expression language with exact first and second derivatives.

Grammar (recursive descent, one token of lookahead):

    expr   := term (('+'|'-') term)*
    term   := factor (('*'|'/') factor)*
    factor := base ('^' factor)?
    base   := NUMBER | IDENT | IDENT '(' expr ')' | '(' expr ')' | '-' base

Functions: sin cos tan exp ln sqrt.  Constants: pi, e.  Numbers are decimal
with an optional exponent.  ``abs`` is recognized and rejected at parse time
(it breaks the smoothness every downstream consumer relies on).  Exponents
must be constant subexpressions; they are folded to a number during parsing.
Non-integer exponents additionally require a positive base at evaluation.

Derivatives are computed in a single forward pass carrying
(value, gradient, Hessian) triples -- no nested first-order passes and no
finite differences -- so the Hessian is exact and symmetric to the last bit.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ExprError",
    "ParseError",
    "EvalDomainError",
    "Expression",
    "Dual2",
    "parse",
    "evaluate",
    "eval_dual2",
    "to_source",
    "with_variables",
]

FUNCTIONS = ("sin", "cos", "tan", "exp", "ln", "sqrt")
CONSTANTS = {"pi": math.pi, "e": math.e}
_RESERVED = set(FUNCTIONS) | set(CONSTANTS) | {"abs"}


class ExprError(Exception):
    """Base class for expression-language errors."""


class ParseError(ExprError):
    """Syntax, unknown-identifier, or arity error; ``column`` is 1-based."""

    def __init__(self, message: str, column: int):
        super().__init__(f"{message} (column {column})")
        self.column = column


class EvalDomainError(ExprError):
    """A function or operator was evaluated outside its domain."""

    def __init__(self, message: str, fragment: str):
        super().__init__(f"{message} in '{fragment}'")
        self.fragment = fragment


# --------------------------------------------------------------------------
# AST
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    index: int
    name: str


@dataclass(frozen=True)
class Neg:
    arg: object


@dataclass(frozen=True)
class Add:
    left: object
    right: object


@dataclass(frozen=True)
class Sub:
    left: object
    right: object


@dataclass(frozen=True)
class Mul:
    left: object
    right: object


@dataclass(frozen=True)
class Div:
    left: object
    right: object


@dataclass(frozen=True)
class Pow:
    base: object
    exponent: float  # always a folded constant


@dataclass(frozen=True)
class Call:
    func: str
    arg: object


@dataclass(frozen=True)
class Expression:
    """An immutable parsed expression over an ordered variable table."""

    root: object
    variables: tuple[str, ...]
    source: str = field(compare=False, default="")

    def eval(self, point) -> float:
        return evaluate(self, point)

    def dual2(self, point, active=None) -> "Dual2":
        return eval_dual2(self, point, active)

    def __str__(self) -> str:
        return to_source(self.root)


# --------------------------------------------------------------------------
# Tokenizer
# --------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<number>(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>[-+*/^(),]))"
)


def _tokenize(source: str):
    tokens = []
    pos = 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            stripped = source[pos:].lstrip()
            if not stripped:
                break
            col = len(source) - len(stripped) + 1
            raise ParseError(f"unexpected character {stripped[0]!r}", col)
        col = m.start(m.lastgroup) + 1
        tokens.append((m.lastgroup, m.group(m.lastgroup), col))
        pos = m.end()
    tokens.append(("end", "", len(source) + 1))
    return tokens


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

class _Parser:
    def __init__(self, tokens, variables):
        self.tokens = tokens
        self.i = 0
        self.variables = variables
        self.var_index = {name: k for k, name in enumerate(variables)}

    def peek(self):
        return self.tokens[self.i]

    def next(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect_op(self, op):
        kind, text, col = self.peek()
        if kind != "op" or text != op:
            got = repr(text) if kind != "end" else "end of input"
            raise ParseError(f"expected '{op}', got {got}", col)
        return self.next()

    def parse(self):
        kind, _, col = self.peek()
        if kind == "end":
            raise ParseError("empty expression", col)
        node = self.expr()
        kind, text, col = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected trailing input {text!r}", col)
        return node

    def expr(self):
        node = self.term()
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text in "+-":
                self.next()
                rhs = self.term()
                node = Add(node, rhs) if text == "+" else Sub(node, rhs)
            else:
                return node

    def term(self):
        node = self.factor()
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text in "*/":
                self.next()
                rhs = self.factor()
                node = Mul(node, rhs) if text == "*" else Div(node, rhs)
            else:
                return node

    def factor(self):
        node = self.base()
        kind, text, col = self.peek()
        if kind == "op" and text == "^":
            self.next()
            expo_col = self.peek()[2]
            expo = self.factor()
            node = Pow(node, self._fold_exponent(expo, expo_col))
        return node

    def base(self):
        kind, text, col = self.next()
        if kind == "number":
            return Num(float(text))
        if kind == "ident":
            return self._ident(text, col)
        if kind == "op" and text == "(":
            node = self.expr()
            self.expect_op(")")
            return node
        if kind == "op" and text == "-":
            return Neg(self.base())
        got = repr(text) if kind != "end" else "end of input"
        raise ParseError(f"expected a number, identifier, or '(', got {got}", col)

    def _ident(self, name, col):
        if name == "abs":
            raise ParseError("'abs' is not supported: it is not smooth at 0", col)
        if name in FUNCTIONS:
            kind, text, ncol = self.peek()
            if kind != "op" or text != "(":
                raise ParseError(f"function '{name}' must be called with '('", ncol)
            self.next()
            arg = self.expr()
            kind, text, acol = self.peek()
            if kind == "op" and text == ",":
                raise ParseError(f"function '{name}' takes exactly one argument", acol)
            self.expect_op(")")
            return Call(name, arg)
        if name in CONSTANTS:
            return Num(CONSTANTS[name])
        if name in self.var_index:
            return Var(self.var_index[name], name)
        raise ParseError(f"unknown identifier '{name}'", col)

    def _fold_exponent(self, node, col):
        try:
            value = _fold_const(node)
        except _NotConstant:
            raise ParseError(
                "exponent must be a constant expression", col
            ) from None
        except EvalDomainError as err:
            raise ParseError(f"invalid constant exponent: {err}", col) from None
        if not math.isfinite(value):
            raise ParseError("constant exponent overflows", col)
        return value


class _NotConstant(Exception):
    pass


def _fold_const(node) -> float:
    """Evaluate a variable-free subtree to a float."""
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        raise _NotConstant
    if isinstance(node, Neg):
        return -_fold_const(node.arg)
    if isinstance(node, Add):
        return _fold_const(node.left) + _fold_const(node.right)
    if isinstance(node, Sub):
        return _fold_const(node.left) - _fold_const(node.right)
    if isinstance(node, Mul):
        return _fold_const(node.left) * _fold_const(node.right)
    if isinstance(node, Div):
        den = _fold_const(node.right)
        if den == 0.0:
            raise EvalDomainError("division by zero", to_source(node))
        return _fold_const(node.left) / den
    if isinstance(node, Pow):
        return _pow_value(_fold_const(node.base), node.exponent, node)
    if isinstance(node, Call):
        return _call_value(node.func, _fold_const(node.arg), node)
    raise TypeError(f"unknown node {node!r}")


def parse(source: str, variables) -> Expression:
    """Parse ``source`` over an ordered variable table.

    Any identifier that is not a declared variable, a function, or one of the
    constants pi/e is an unknown-identifier error carrying its 1-based column.
    """
    variables = tuple(variables)
    if len(set(variables)) != len(variables):
        raise ValueError(f"duplicate variable names in {variables!r}")
    clash = _RESERVED.intersection(variables)
    if clash:
        raise ValueError(f"variable names shadow built-ins: {sorted(clash)}")
    root = _Parser(_tokenize(source), variables).parse()
    return Expression(root, variables, source)


# --------------------------------------------------------------------------
# Printing
# --------------------------------------------------------------------------

_PREC_ATOM = 10
_PREC_NEG = 4
_PREC_POW = 3
_PREC_TERM = 2
_PREC_EXPR = 1


def _fmt_number(v: float) -> str:
    if v == int(v) and abs(v) < 1e16:
        return str(int(v))
    return repr(v)


def _render(node, ctx: int) -> str:
    if isinstance(node, Num):
        return _fmt_number(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Call):
        return f"{node.func}({_render(node.arg, 0)})"
    if isinstance(node, Neg):
        text, prec = "-" + _render(node.arg, _PREC_NEG), _PREC_NEG
    elif isinstance(node, Pow):
        text = f"{_render(node.base, _PREC_NEG)}^{_fmt_number(node.exponent)}"
        prec = _PREC_POW
    elif isinstance(node, Mul):
        text = f"{_render(node.left, _PREC_TERM)}*{_render(node.right, _PREC_TERM + 1)}"
        prec = _PREC_TERM
    elif isinstance(node, Div):
        text = f"{_render(node.left, _PREC_TERM)}/{_render(node.right, _PREC_TERM + 1)}"
        prec = _PREC_TERM
    elif isinstance(node, Add):
        text = f"{_render(node.left, _PREC_EXPR)}+{_render(node.right, _PREC_EXPR + 1)}"
        prec = _PREC_EXPR
    elif isinstance(node, Sub):
        text = f"{_render(node.left, _PREC_EXPR)}-{_render(node.right, _PREC_EXPR + 1)}"
        prec = _PREC_EXPR
    else:
        raise TypeError(f"unknown node {node!r}")
    return f"({text})" if prec < ctx else text


def to_source(node_or_expr) -> str:
    """Render a tree back to grammar-conformant source.

    Re-parsing the result yields a structurally identical tree (parentheses
    are inserted wherever associativity or precedence would regroup).
    """
    node = node_or_expr.root if isinstance(node_or_expr, Expression) else node_or_expr
    return _render(node, 0)


def _remap(node, variables, index_map):
    if isinstance(node, (Num,)):
        return node
    if isinstance(node, Var):
        j = index_map[node.index]
        return Var(j, variables[j])
    if isinstance(node, Neg):
        return Neg(_remap(node.arg, variables, index_map))
    if isinstance(node, Add):
        return Add(_remap(node.left, variables, index_map),
                   _remap(node.right, variables, index_map))
    if isinstance(node, Sub):
        return Sub(_remap(node.left, variables, index_map),
                   _remap(node.right, variables, index_map))
    if isinstance(node, Mul):
        return Mul(_remap(node.left, variables, index_map),
                   _remap(node.right, variables, index_map))
    if isinstance(node, Div):
        return Div(_remap(node.left, variables, index_map),
                   _remap(node.right, variables, index_map))
    if isinstance(node, Pow):
        return Pow(_remap(node.base, variables, index_map), node.exponent)
    if isinstance(node, Call):
        return Call(node.func, _remap(node.arg, variables, index_map))
    raise TypeError(f"unknown node {node!r}")


def with_variables(e: Expression, variables, index_map: dict) -> Expression:
    """Rebuild ``e`` over a new variable table.

    ``index_map`` sends each old variable index to its slot in the new
    table.  Used to lift coordinate-free functions onto the canonical
    (q1..qn, v1..vn) table.
    """
    variables = tuple(variables)
    root = _remap(e.root, variables, index_map)
    return Expression(root, variables, to_source(root))


# --------------------------------------------------------------------------
# Evaluation: forward pass with (value, gradient, Hessian) triples
# --------------------------------------------------------------------------

class Dual2:
    """Value, gradient, and symmetric Hessian of one scalar quantity.

    The gradient has one slot per *active* variable, in the order the active
    index list was given; the Hessian is square over the same slots.
    """

    __slots__ = ("value", "grad", "hess")

    def __init__(self, value: float, grad: np.ndarray, hess: np.ndarray):
        self.value = value
        self.grad = grad
        self.hess = hess

    @staticmethod
    def constant(value: float, m: int) -> "Dual2":
        return Dual2(float(value), np.zeros(m), np.zeros((m, m)))

    def __repr__(self):
        return f"Dual2(value={self.value!r}, grad={self.grad!r}, hess={self.hess!r})"

    def __add__(self, o):
        return Dual2(self.value + o.value, self.grad + o.grad, self.hess + o.hess)

    def __sub__(self, o):
        return Dual2(self.value - o.value, self.grad - o.grad, self.hess - o.hess)

    def __neg__(self):
        return Dual2(-self.value, -self.grad, -self.hess)

    def __mul__(self, o):
        cross = np.outer(self.grad, o.grad)
        return Dual2(
            self.value * o.value,
            self.grad * o.value + o.grad * self.value,
            self.hess * o.value + o.hess * self.value + cross + cross.T,
        )

    def chain(self, f0: float, f1: float, f2: float) -> "Dual2":
        """Compose with a scalar map given f(x), f'(x), f''(x) at self.value."""
        return Dual2(
            f0,
            f1 * self.grad,
            f1 * self.hess + f2 * np.outer(self.grad, self.grad),
        )


def _call_value(func: str, x: float, node) -> float:
    if func == "sin":
        return math.sin(x)
    if func == "cos":
        return math.cos(x)
    if func == "tan":
        return math.tan(x)
    if func == "exp":
        return math.exp(x)
    if func == "ln":
        if x <= 0.0:
            raise EvalDomainError(f"ln of non-positive value {x!r}", to_source(node))
        return math.log(x)
    if func == "sqrt":
        if x < 0.0:
            raise EvalDomainError(f"sqrt of negative value {x!r}", to_source(node))
        return math.sqrt(x)
    raise TypeError(f"unknown function {func!r}")  # pragma: no cover


def _call_dual(func: str, u: Dual2, node) -> Dual2:
    x = u.value
    if func == "sin":
        s = math.sin(x)
        return u.chain(s, math.cos(x), -s)
    if func == "cos":
        c = math.cos(x)
        return u.chain(c, -math.sin(x), -c)
    if func == "tan":
        t = math.tan(x)
        d = 1.0 + t * t
        return u.chain(t, d, 2.0 * t * d)
    if func == "exp":
        ex = math.exp(x)
        return u.chain(ex, ex, ex)
    if func == "ln":
        if x <= 0.0:
            raise EvalDomainError(f"ln of non-positive value {x!r}", to_source(node))
        return u.chain(math.log(x), 1.0 / x, -1.0 / (x * x))
    if func == "sqrt":
        if x <= 0.0:
            raise EvalDomainError(
                f"sqrt needs a positive argument for derivatives, got {x!r}",
                to_source(node),
            )
        s = math.sqrt(x)
        return u.chain(s, 0.5 / s, -0.25 / (x * s))
    raise TypeError(f"unknown function {func!r}")  # pragma: no cover


def _pow_value(x: float, b: float, node) -> float:
    n = round(b)
    if b == n:  # integer exponent: any base, except 0 with n < 0
        if x == 0.0 and n < 0:
            raise EvalDomainError("zero raised to a negative power", to_source(node))
        return float(x ** int(n))
    if x <= 0.0:
        raise EvalDomainError(
            f"non-integer power of non-positive base {x!r}", to_source(node)
        )
    return x ** b


def _pow_dual(u: Dual2, b: float, node) -> Dual2:
    x = u.value
    n = round(b)
    if b == n:
        n = int(n)
        if x == 0.0 and n < 3:
            # keep the limits finite where they exist
            if n < 0:
                raise EvalDomainError(
                    "zero raised to a negative power", to_source(node)
                )
            table = {0: (1.0, 0.0, 0.0), 1: (0.0, 1.0, 0.0), 2: (0.0, 0.0, 2.0)}
            return u.chain(*table[n])
        f0 = float(x ** n)
        f1 = n * float(x ** (n - 1)) if n != 0 else 0.0
        f2 = n * (n - 1) * float(x ** (n - 2)) if n not in (0, 1) else 0.0
        return u.chain(f0, f1, f2)
    if x <= 0.0:
        raise EvalDomainError(
            f"non-integer power of non-positive base {x!r}", to_source(node)
        )
    f0 = x ** b
    return u.chain(f0, b * x ** (b - 1.0), b * (b - 1.0) * x ** (b - 2.0))


def _d2(node, point, slot, m) -> Dual2:
    if isinstance(node, Num):
        return Dual2.constant(node.value, m)
    if isinstance(node, Var):
        x = point[node.index]
        grad = np.zeros(m)
        k = slot.get(node.index)
        if k is not None:
            grad[k] = 1.0
        return Dual2(x, grad, np.zeros((m, m)))
    if isinstance(node, Neg):
        return -_d2(node.arg, point, slot, m)
    if isinstance(node, Add):
        return _d2(node.left, point, slot, m) + _d2(node.right, point, slot, m)
    if isinstance(node, Sub):
        return _d2(node.left, point, slot, m) - _d2(node.right, point, slot, m)
    if isinstance(node, Mul):
        return _d2(node.left, point, slot, m) * _d2(node.right, point, slot, m)
    if isinstance(node, Div):
        num = _d2(node.left, point, slot, m)
        den = _d2(node.right, point, slot, m)
        if den.value == 0.0:
            raise EvalDomainError("division by zero", to_source(node))
        x = den.value
        return num * den.chain(1.0 / x, -1.0 / (x * x), 2.0 / (x * x * x))
    if isinstance(node, Pow):
        return _pow_dual(_d2(node.base, point, slot, m), node.exponent, node)
    if isinstance(node, Call):
        return _call_dual(node.func, _d2(node.arg, point, slot, m), node)
    raise TypeError(f"unknown node {node!r}")


def eval_dual2(e: Expression, point, active=None) -> Dual2:
    """Evaluate ``e`` with exact gradient and Hessian in the active variables.

    Parameters
    ----------
    e : Expression
    point : full coordinate vector, one entry per variable in ``e.variables``.
    active : iterable of variable indices to differentiate against, in slot
        order; ``None`` means all variables.
    """
    point = np.asarray(point, dtype=float)
    nv = len(e.variables)
    if point.shape != (nv,):
        raise ValueError(f"point has shape {point.shape}, expected ({nv},)")
    if active is None:
        active = range(nv)
    active = tuple(int(a) for a in active)
    if len(set(active)) != len(active):
        raise ValueError(f"duplicate active indices {active!r}")
    for a in active:
        if not 0 <= a < nv:
            raise ValueError(f"active index {a} out of range for {nv} variables")
    slot = {a: k for k, a in enumerate(active)}
    return _d2(e.root, point, slot, len(active))


def _ev(node, point) -> float:
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        return point[node.index]
    if isinstance(node, Neg):
        return -_ev(node.arg, point)
    if isinstance(node, Add):
        return _ev(node.left, point) + _ev(node.right, point)
    if isinstance(node, Sub):
        return _ev(node.left, point) - _ev(node.right, point)
    if isinstance(node, Mul):
        return _ev(node.left, point) * _ev(node.right, point)
    if isinstance(node, Div):
        den = _ev(node.right, point)
        if den == 0.0:
            raise EvalDomainError("division by zero", to_source(node))
        return _ev(node.left, point) / den
    if isinstance(node, Pow):
        return _pow_value(_ev(node.base, point), node.exponent, node)
    if isinstance(node, Call):
        return _call_value(node.func, _ev(node.arg, point), node)
    raise TypeError(f"unknown node {node!r}")


def evaluate(e: Expression, point) -> float:
    """Evaluate ``e`` at ``point``.

    Value-only twin of :func:`eval_dual2`: plain floats, and the slightly
    wider domains that come with them (``sqrt(0)`` is legal here, while the
    derivative pass must reject it).
    """
    point = np.asarray(point, dtype=float)
    nv = len(e.variables)
    if point.shape != (nv,):
        raise ValueError(f"point has shape {point.shape}, expected ({nv},)")
    return float(_ev(e.root, point))
