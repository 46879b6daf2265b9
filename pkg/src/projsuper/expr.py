"""Immutable expression trees in x, y, p1, p2 and named parameters.

The module covers parsing, symbolic differentiation, vectorised numerical
evaluation and a light simplifier.  Grammar (EBNF, see docs/grammar.md):

    expr    = term , { ("+" | "-") , term } ;
    term    = unary , { ("*" | "/") , unary } ;
    unary   = ("-" | "+") , unary | power ;
    power   = primary , [ "^" , unary ] ;
    primary = number | name | name , "(" , expr , ")" | "(" , expr , ")" ;

Implicit multiplication (``2x``, ``x(y)``) is rejected.
"""
from __future__ import annotations

import math
import re
from typing import Callable, Mapping

import numpy as np

VARIABLES = ("x", "y", "p1", "p2")
FUNCTIONS = ("sin", "cos", "tan", "exp", "ln", "abs", "sign")
# parse-time aliases; sqrt becomes a real power
_FUNC_ALIASES = {"log": "ln", "sqrt": "sqrt"}
DEFAULT_PARAMETERS = (
    "c1", "c2", "c3", "c4", "a", "b", "c", "d", "D", "omega",
    "theta", "phi", "lam", "t", "t1", "t2", "t3",
)
_NAME_ALIASES = {"θ": "theta", "φ": "phi", "ω": "omega", "λ": "lam", "π": "pi"}


class ExprError(Exception):
    pass


class ExprSyntaxError(ExprError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class UnknownIdentifierError(ExprSyntaxError):
    def __init__(self, name, offset, permitted):
        self.name = name
        self.permitted = tuple(sorted(permitted))
        ExprError.__init__(
            self,
            f"unknown identifier {name!r} at byte offset {offset}; "
            f"permitted names: {', '.join(self.permitted)}",
        )
        self.offset = offset


class UnboundSymbolError(ExprError):
    def __init__(self, names):
        self.names = tuple(sorted(names))
        super().__init__("unbound symbols: " + ", ".join(self.names))


class DomainError(ExprError, ArithmeticError):
    def __init__(self, message, subterm=None):
        self.subterm = subterm
        where = f" in subterm {to_string(subterm)}" if subterm is not None else ""
        super().__init__(message + where)


class Opaque:
    """A scalar function known only numerically, with symbolic partials.

    Used for potentials obtained by quadrature: the value comes from
    ``func(bindings)`` while derivatives are ordinary expressions.
    """

    def __init__(self, name, func: Callable, partials: Mapping[str, "Expr"]):
        self.name = name
        self.func = func
        self.partials = dict(partials)

    def __repr__(self):
        return f"Opaque({self.name})"


# precedence used by the printer
_PREC = {"add": 1, "mul": 2, "div": 2, "neg": 3, "pow": 4}


class Expr:
    """Node of an immutable expression DAG.

    ``kind`` is one of const, param, var, add, mul, div, pow, a function
    name from FUNCTIONS, or opaque.  ``data`` holds the constant value, the
    symbol name or the Opaque payload.
    """

    __slots__ = ("kind", "args", "data", "_hash")
    __array_ufunc__ = None  # let numpy scalars defer to our operators

    def __init__(self, kind, args=(), data=None):
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "args", tuple(args))
        object.__setattr__(self, "data", data)
        key = data if kind != "opaque" else id(data)
        object.__setattr__(self, "_hash", hash((kind, key, self.args)))

    def __setattr__(self, name, value):
        raise AttributeError("Expr is immutable")

    def __hash__(self):
        return self._hash

    def __eq__(self, other):
        if self is other:
            return True
        if not isinstance(other, Expr) or self._hash != other._hash:
            return False
        if self.kind != other.kind or len(self.args) != len(other.args):
            return False
        if self.kind == "opaque":
            return self.data is other.data
        return self.data == other.data and self.args == other.args

    def __repr__(self):
        return f"Expr({to_string(self)!r})"

    def __str__(self):
        return to_string(self)

    # arithmetic builds simplified nodes
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return add(self, neg(o))

    def __rsub__(self, o):
        return add(o, neg(self))

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __pow__(self, o):
        return power(self, o)

    def __rpow__(self, o):
        return power(o, self)

    def __neg__(self):
        return neg(self)

    def __pos__(self):
        return self

    @property
    def is_const(self):
        return self.kind == "const"

    def free_symbols(self):
        out, seen, stack = set(), set(), [self]
        while stack:
            e = stack.pop()
            if id(e) in seen:
                continue
            seen.add(id(e))
            if e.kind in ("var", "param"):
                out.add(e.data)
            elif e.kind == "opaque":
                out.update(("x", "y"))
                for p in e.data.partials.values():
                    stack.append(p)
            stack.extend(e.args)
        return out


def const(v) -> Expr:
    return Expr("const", (), float(v))


def var(name) -> Expr:
    if name not in VARIABLES:
        raise ExprError(f"{name!r} is not a variable")
    return Expr("var", (), name)


def param(name) -> Expr:
    return Expr("param", (), name)


def opaque(obj: Opaque) -> Expr:
    return Expr("opaque", (), obj)


X, Y, P1, P2 = (var(n) for n in VARIABLES)
ZERO, ONE = const(0), const(1)


def _as_expr(v):
    if isinstance(v, Expr):
        return v
    if isinstance(v, (int, float, np.floating, np.integer)):
        return const(v)
    raise TypeError(f"cannot convert {type(v).__name__} to Expr")


def _cval(e, v):
    return e.kind == "const" and e.data == v


# smart constructors: cheap folding only

def add(*terms) -> Expr:
    flat, total = [], 0.0
    for t in terms:
        t = _as_expr(t)
        parts = t.args if t.kind == "add" else (t,)
        for p in parts:
            if p.kind == "const":
                total += p.data
            else:
                flat.append(p)
    if total != 0.0 or not flat:
        flat.append(const(total))
    if len(flat) == 1:
        return flat[0]
    return Expr("add", flat)


def mul(*factors) -> Expr:
    flat, coeff = [], 1.0
    for f in factors:
        f = _as_expr(f)
        parts = f.args if f.kind == "mul" else (f,)
        for p in parts:
            if p.kind == "const":
                coeff *= p.data
            else:
                flat.append(p)
    if coeff == 0.0:
        return ZERO
    if coeff != 1.0 or not flat:
        flat.insert(0, const(coeff))
    if len(flat) == 1:
        return flat[0]
    return Expr("mul", flat)


def neg(e) -> Expr:
    return mul(-1.0, e)


def div(a, b) -> Expr:
    a, b = _as_expr(a), _as_expr(b)
    if _cval(b, 1.0):
        return a
    if _cval(a, 0.0) and not _cval(b, 0.0):
        return ZERO
    if a.kind == "const" and b.kind == "const" and b.data != 0.0:
        return const(a.data / b.data)
    if b.kind == "const" and b.data != 0.0:
        return mul(1.0 / b.data, a) if _exact_reciprocal(b.data) else Expr("div", (a, b))
    return Expr("div", (a, b))


def _exact_reciprocal(v):
    # multiplying by 1/v is exact only for powers of two
    m, _ = math.frexp(v)
    return abs(m) == 0.5


def power(base, expo) -> Expr:
    base, expo = _as_expr(base), _as_expr(expo)
    if _cval(expo, 0.0):
        return ONE
    if _cval(expo, 1.0):
        return base
    if base.kind == "const" and expo.kind == "const":
        try:
            return const(_pow_checked(base.data, expo.data))
        except (DomainError, OverflowError, ZeroDivisionError):
            pass
    if base.kind == "pow" and expo.kind == "const" and float(expo.data).is_integer():
        inner = base.args[1]
        if inner.kind == "const":
            return power(base.args[0], inner.data * expo.data)
    return Expr("pow", (base, expo))


def _pow_checked(b, e):
    if b < 0 and not float(e).is_integer():
        raise DomainError("real power of negative base")
    if b == 0 and e < 0:
        raise ZeroDivisionError
    return b ** e


def func(name, arg) -> Expr:
    if name not in FUNCTIONS:
        raise ExprError(f"unknown function {name!r}")
    arg = _as_expr(arg)
    if arg.kind == "const":
        try:
            v = _apply_func(name, np.float64(arg.data), None)
            if np.isfinite(v):
                return const(float(v))
        except DomainError:
            pass
    if name == "abs" and arg.kind in ("abs", "exp"):
        return arg
    return Expr(name, (arg,))


def sin(u):
    return func("sin", u)


def cos(u):
    return func("cos", u)


def tan(u):
    return func("tan", u)


def exp(u):
    return func("exp", u)


def ln(u):
    return func("ln", u)


def absolute(u):
    return func("abs", u)


def sign(u):
    return func("sign", u)


def sqrt(u):
    return power(u, 0.5)


# ---------------------------------------------------------------- parsing

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[^\W\d]\w*)|(?P<op>\*\*|[-+*/^(),]))"
)


def _tokenize(text):
    toks, i, n = [], 0, len(text)
    while i < n:
        if text[i].isspace():
            i += 1
            continue
        m = _TOKEN.match(text, i)
        if not m or m.end() == i:
            raise ExprSyntaxError(f"unexpected character {text[i]!r}", len(text[:i].encode()))
        kind = m.lastgroup
        start = m.start(kind)
        toks.append((kind, m.group(kind), len(text[:start].encode())))
        i = m.end()
    toks.append(("end", "", len(text.encode())))
    return toks


class _Parser:
    def __init__(self, text, parameters):
        self.toks = _tokenize(text)
        self.pos = 0
        self.params = set(parameters)

    def peek(self):
        return self.toks[self.pos]

    def take(self):
        t = self.toks[self.pos]
        self.pos += 1
        return t

    def expect(self, value):
        kind, val, off = self.take()
        if val != value:
            found = "end of input" if kind == "end" else repr(val)
            raise ExprSyntaxError(f"expected {value!r}, found {found}", off)

    def permitted(self):
        return set(VARIABLES) | self.params | set(FUNCTIONS) | {"pi", "sqrt", "log"}

    def parse(self):
        e = self.expr()
        kind, val, off = self.peek()
        if kind != "end":
            if kind in ("num", "name") or val == "(":
                raise ExprSyntaxError("implicit multiplication is not allowed", off)
            raise ExprSyntaxError(f"unexpected token {val!r}", off)
        return e

    def expr(self):
        terms = [self.term()]
        while self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            t = self.term()
            terms.append(t if op == "+" else Expr("mul", (const(-1.0), t)))
        return terms[0] if len(terms) == 1 else Expr("add", terms)

    def term(self):
        e = self.unary()
        factors = [e]
        while self.peek()[1] in ("*", "/"):
            op = self.take()[1]
            rhs = self.unary()
            if op == "*":
                factors.append(rhs)
            else:
                lhs = factors[0] if len(factors) == 1 else Expr("mul", factors)
                factors = [Expr("div", (lhs, rhs))]
        return factors[0] if len(factors) == 1 else Expr("mul", factors)

    def unary(self):
        op = self.peek()[1]
        if op in ("-", "+"):
            self.take()
            u = self.unary()
            if op == "+":
                return u
            if u.kind == "const":
                return const(-u.data)
            return Expr("mul", (const(-1.0), u))
        return self.power()

    def power(self):
        base = self.primary()
        if self.peek()[1] in ("^", "**"):
            self.take()
            base = Expr("pow", (base, self.unary()))
        kind, val, off = self.peek()
        if kind in ("num", "name") or val == "(":
            raise ExprSyntaxError("implicit multiplication is not allowed", off)
        return base

    def primary(self):
        kind, val, off = self.take()
        if kind == "num":
            return const(float(val))
        if val == "(":
            e = self.expr()
            self.expect(")")
            return e
        if kind == "name":
            name = _NAME_ALIASES.get(val, val)
            if name in FUNCTIONS or name in _FUNC_ALIASES:
                if self.peek()[1] != "(":
                    raise ExprSyntaxError(f"function {val!r} needs an argument list", self.peek()[2])
                self.take()
                arg = self.expr()
                self.expect(")")
                name = _FUNC_ALIASES.get(name, name)
                if name == "sqrt":
                    return Expr("pow", (arg, const(0.5)))
                return Expr(name, (arg,))
            if name == "pi":
                return const(math.pi)
            if name in VARIABLES:
                return var(name)
            if name in self.params:
                return param(name)
            raise UnknownIdentifierError(val, off, self.permitted())
        if kind == "end":
            raise ExprSyntaxError("unexpected end of input", off)
        raise ExprSyntaxError(f"unexpected token {val!r}", off)


def parse(text: str, parameters=None) -> Expr:
    """Parse ``text``; identifiers other than x, y, p1, p2 must be listed
    in ``parameters`` (defaults to DEFAULT_PARAMETERS)."""
    if parameters is None:
        parameters = DEFAULT_PARAMETERS
    return _Parser(text, parameters).parse()


# --------------------------------------------------------------- printing

def _fmt_number(v):
    if float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def _prec(e):
    if e.kind == "const":
        return _PREC["neg"] if e.data < 0 else 5
    if e.kind == "mul" and e.args[0].kind == "const" and e.args[0].data < 0:
        return _PREC["neg"] if e.args[0].data == -1.0 else _PREC["mul"]
    return _PREC.get(e.kind, 5)


def _wrap(e, need):
    s = to_string(e)
    return f"({s})" if _prec(e) < need else s


def to_string(e: Expr) -> str:
    k = e.kind
    if k == "const":
        return _fmt_number(e.data)
    if k in ("var", "param"):
        return e.data
    if k == "opaque":
        return f"{e.data.name}(x, y)"
    if k == "add":
        out = to_string(e.args[0])
        for t in e.args[1:]:
            if t.kind == "mul" and t.args[0].kind == "const" and t.args[0].data < 0:
                pos = mul(-t.args[0].data, *t.args[1:]) if t.args[0].data != -1.0 else (
                    t.args[1] if len(t.args) == 2 else Expr("mul", t.args[1:]))
                if pos.kind == "mul" and pos.args[0].kind == "const" and pos.args[0].data < 0:
                    out += " + " + _wrap(t, _PREC["add"] + 1)
                else:
                    out += " - " + _wrap(pos, _PREC["add"] + 1)
            elif t.kind == "const" and t.data < 0:
                out += " - " + _fmt_number(-t.data)
            else:
                out += " + " + _wrap(t, _PREC["add"] + 1)
        return out
    if k == "mul":
        args = list(e.args)
        if args[0].kind == "const" and args[0].data == -1.0 and len(args) > 1:
            rest = args[1] if len(args) == 2 else Expr("mul", args[1:])
            return "-" + _wrap(rest, _PREC["pow"])
        parts = []
        for i, f in enumerate(args):
            if i == 0 and f.kind == "const":
                parts.append(_fmt_number(f.data))
            else:
                parts.append(_wrap(f, _PREC["mul"] + (1 if f.kind in ("div", "mul") else 0)))
        return "*".join(parts)
    if k == "div":
        a, b = e.args
        return _wrap(a, _PREC["mul"]) + "/" + _wrap(b, _PREC["mul"] + 1)
    if k == "pow":
        b, x = e.args
        return _wrap(b, _PREC["pow"] + 1) + "^" + _wrap(x, 5)
    return f"{k}({to_string(e.args[0])})"


# -------------------------------------------------------- differentiation

def diff(e: Expr, v) -> Expr:
    """Exact partial derivative with respect to variable ``v``."""
    name = v.data if isinstance(v, Expr) else v
    memo = {}

    def d(n):
        key = id(n)
        if key in memo:
            return memo[key][1]
        r = _d(n)
        memo[key] = (n, r)  # keep n alive so ids stay unique
        return r

    def _d(n):
        k = n.kind
        if k in ("const", "param"):
            return ZERO
        if k == "var":
            return ONE if n.data == name else ZERO
        if k == "opaque":
            return n.data.partials.get(name, ZERO)
        if k == "add":
            return add(*(d(t) for t in n.args))
        if k == "mul":
            terms = []
            for i, f in enumerate(n.args):
                df = d(f)
                if _cval(df, 0.0):
                    continue
                terms.append(mul(*n.args[:i], df, *n.args[i + 1:]))
            return add(*terms) if terms else ZERO
        if k == "div":
            a, b = n.args
            da, db = d(a), d(b)
            if _cval(db, 0.0):
                return div(da, b)
            return div(add(mul(da, b), neg(mul(a, db))), power(b, 2))
        if k == "pow":
            b, x = n.args
            db = d(b)
            if x.kind != "const" and not x.free_symbols():
                x = const(evaluate(x))
            if name not in x.free_symbols():
                if _cval(db, 0.0):
                    return ZERO
                return mul(x, power(b, add(x, -1.0)), db)
            dx = d(x)
            return mul(n, add(mul(dx, ln(b)), div(mul(x, db), b)))
        u = n.args[0]
        du = d(u)
        if _cval(du, 0.0):
            return ZERO
        if k == "sin":
            return mul(cos(u), du)
        if k == "cos":
            return neg(mul(sin(u), du))
        if k == "tan":
            return div(du, power(cos(u), 2))
        if k == "exp":
            return mul(n, du)
        if k == "ln":
            return div(du, u)
        if k == "abs":
            # valid off u = 0 only
            return mul(sign(u), du)
        if k == "sign":
            return ZERO
        raise ExprError(f"cannot differentiate node {k}")

    return d(e)


# ------------------------------------------------------------- evaluation

def _apply_func(name, u, node):
    if name == "sin":
        return np.sin(u)
    if name == "cos":
        return np.cos(u)
    if name == "tan":
        return np.tan(u)
    if name == "exp":
        return np.exp(u)
    if name == "ln":
        if np.any(u <= 0):
            raise DomainError("ln of non-positive value", node)
        return np.log(u)
    if name == "abs":
        return np.abs(u)
    if name == "sign":
        return np.sign(u)
    raise ExprError(f"unknown function {name}")


def evaluate(e: Expr, bindings: Mapping[str, object] | None = None):
    """Evaluate ``e``; bindings map names to floats or numpy arrays.

    Returns a Python float when every binding is scalar.
    """
    bindings = dict(bindings or {})
    for k in list(bindings):
        if k in _NAME_ALIASES:
            bindings[_NAME_ALIASES[k]] = bindings.pop(k)
    missing = e.free_symbols() - set(bindings)
    if missing:
        raise UnboundSymbolError(missing)
    vals = {k: (np.asarray(v, dtype=float) if not np.isscalar(v) else float(v))
            for k, v in bindings.items()}
    memo = {}
    with np.errstate(all="ignore"):
        out = _eval(e, vals, memo)
    if isinstance(out, np.ndarray) and out.ndim == 0:
        return float(out)
    if isinstance(out, (np.floating, float, int)):
        return float(out)
    return out


def _eval(n, vals, memo):
    r = memo.get(n)
    if r is not None:
        return r
    k = n.kind
    if k == "const":
        r = n.data
    elif k in ("var", "param"):
        r = vals[n.data]
    elif k == "opaque":
        r = n.data.func(vals)
    elif k == "add":
        it = iter(n.args)
        r = _eval(next(it), vals, memo)
        for t in it:
            r = r + _eval(t, vals, memo)
    elif k == "mul":
        it = iter(n.args)
        r = _eval(next(it), vals, memo)
        for t in it:
            r = r * _eval(t, vals, memo)
    elif k == "div":
        a = _eval(n.args[0], vals, memo)
        b = _eval(n.args[1], vals, memo)
        if np.any(np.asarray(b) == 0):
            raise DomainError("division by zero", n)
        r = a / b
    elif k == "pow":
        b = _eval(n.args[0], vals, memo)
        x = _eval(n.args[1], vals, memo)
        xa = np.asarray(x)
        integral = np.all(xa == np.round(xa))
        ba = np.asarray(b)
        if not integral and np.any(ba < 0):
            raise DomainError("real power of negative base with non-integer exponent", n)
        if np.any((ba == 0) & (xa < 0)):
            raise DomainError("division by zero", n)
        if integral and np.ndim(x) == 0 and abs(float(x)) <= 64:
            r = np.power(b, int(round(float(x))) if float(x) >= 0 else float(x))
        else:
            r = np.power(b, x)
    else:
        r = _apply_func(k, _eval(n.args[0], vals, memo), n)
    memo[n] = r
    return r


# ----------------------------------------------------------- simplifying

def substitute(e: Expr, mapping: Mapping[str, object]) -> Expr:
    """Replace variables/parameters by expressions or numbers."""
    mp = {k: _as_expr(v) for k, v in mapping.items()}
    return _rebuild(e, lambda n: mp.get(n.data) if n.kind in ("var", "param") else None)


def simplify(e: Expr) -> Expr:
    """Constant folding, identity removal, like-term and power merging."""
    return _rebuild(e, None, merge=True)


def _rebuild(e, leaf, merge=False):
    memo = {}

    def go(n):
        key = id(n)
        if key in memo:
            return memo[key][1]
        if leaf is not None:
            rep = leaf(n)
            if rep is not None:
                memo[key] = (n, rep)
                return rep
        if not n.args:
            r = n
        else:
            args = [go(a) for a in n.args]
            k = n.kind
            if k == "add":
                r = _merge_terms(args) if merge else add(*args)
            elif k == "mul":
                r = _merge_factors(args) if merge else mul(*args)
            elif k == "div":
                r = div(*args)
            elif k == "pow":
                r = power(*args)
            else:
                r = func(k, args[0])
        memo[key] = (n, r)
        return r

    return go(e)


def _split_coeff(t):
    if t.kind == "mul" and t.args[0].kind == "const":
        rest = t.args[1:]
        return t.args[0].data, (rest[0] if len(rest) == 1 else Expr("mul", rest))
    if t.kind == "const":
        return t.data, ONE
    return 1.0, t


def _merge_terms(args):
    flat = []
    for a in args:
        flat.extend(a.args if a.kind == "add" else (a,))
    coeffs, order = {}, []
    for t in flat:
        c, body = _split_coeff(t)
        if body not in coeffs:
            order.append(body)
            coeffs[body] = 0.0
        coeffs[body] += c
    terms = [mul(coeffs[b], b) for b in order if coeffs[b] != 0.0]
    return add(*terms)


def _merge_factors(args):
    flat = []
    for a in args:
        flat.extend(a.args if a.kind == "mul" else (a,))
    expo, order, coeff = {}, [], 1.0
    for f in flat:
        if f.kind == "const":
            coeff *= f.data
            continue
        if f.kind == "pow" and f.args[1].kind == "const":
            base, p = f.args[0], f.args[1].data
        else:
            base, p = f, 1.0
        if base not in expo:
            order.append(base)
            expo[base] = 0.0
        expo[base] += p
    return mul(coeff, *(power(b, expo[b]) for b in order))
