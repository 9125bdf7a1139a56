"""Expression trees for deterministic nodes and family arguments.

Expressions are evaluated vectorised over plate copies.  Every evaluated value
carries exactly ``nb`` leading batch axes (one per bound plate, size 1 when the
value does not vary along that plate) followed by its value axes.  Keeping the
batch rank fixed lets scalars, vectors and matrices mix without ambiguity.

Both reverse-mode (vector-Jacobian) and forward-mode (Jacobian-vector)
derivatives are provided; references to graph nodes are resolved by an
:class:`EvalContext` supplied by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import expit

__all__ = [
    "Expr",
    "Const",
    "Ref",
    "Neg",
    "BinOp",
    "Call",
    "Compare",
    "Vector",
    "PlateSum",
    "EvalContext",
    "ExprError",
    "evaluate",
    "forward",
    "vjp",
    "jvp",
    "refs",
    "substitute",
    "to_source",
    "FUNCTIONS",
    "unbroadcast",
    "infer_shape",
]


class ExprError(ValueError):
    """Raised when an expression cannot be evaluated."""


class Expr:
    """Base class of all expression nodes."""

    __slots__ = ()


@dataclass(frozen=True)
class Const(Expr):
    value: float


@dataclass(frozen=True)
class Ref(Expr):
    name: str
    index: tuple = ()


@dataclass(frozen=True)
class Neg(Expr):
    arg: Expr


@dataclass(frozen=True)
class BinOp(Expr):
    op: str
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Call(Expr):
    fn: str
    args: tuple


@dataclass(frozen=True)
class Compare(Expr):
    op: str
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Vector(Expr):
    items: tuple


@dataclass(frozen=True)
class PlateSum(Expr):
    plate: str
    body: Expr


# name -> number of arguments
FUNCTIONS = {"exp": 1, "log": 1, "sigmoid": 1, "pow": 2, "dot": 2, "ind": 1}

_COMPARE = {
    "<": np.less,
    "<=": np.less_equal,
    ">": np.greater,
    ">=": np.greater_equal,
    "==": np.equal,
    "!=": np.not_equal,
}


class EvalContext:
    """Resolves references while an expression is evaluated.

    Subclasses implement :meth:`gather`, :meth:`scatter` and :meth:`plate_sum`.
    ``nb`` is the number of leading batch axes of every value.
    """

    nb: int = 0

    def gather(self, ref: Ref) -> tuple[np.ndarray, object]:
        """Return the value of ``ref`` and an opaque key used by scatter."""
        raise NotImplementedError

    def scatter(self, ref: Ref, key: object, grad: np.ndarray) -> None:
        """Receive the reverse-mode gradient of a gathered reference."""

    def tangent(self, ref: Ref, key: object, value: np.ndarray) -> Optional[np.ndarray]:
        """Return the forward-mode tangent of a gathered reference or None."""
        return None

    def plate_sum(self, plate: str) -> tuple["EvalContext", int]:
        """Return a context with ``plate`` bound on a new trailing batch axis."""
        raise ExprError(f"sum over plate '{plate}' is not available here")

    def plate_size(self, plate: str) -> int:
        raise ExprError(f"unknown plate '{plate}'")


def _value_rank(x: np.ndarray, nb: int) -> int:
    return x.ndim - nb


def _align(a: np.ndarray, b: np.ndarray, nb: int) -> tuple[np.ndarray, np.ndarray]:
    """Insert singleton value axes so operands of different value rank broadcast."""
    ra, rb = _value_rank(a, nb), _value_rank(b, nb)
    if ra < rb:
        a = a.reshape(a.shape[:nb] + (1,) * (rb - ra) + a.shape[nb:])
    elif rb < ra:
        b = b.reshape(b.shape[:nb] + (1,) * (ra - rb) + b.shape[nb:])
    return a, b


def unbroadcast(g: np.ndarray, shape: tuple, nb: int) -> np.ndarray:
    """Reduce ``g`` to ``shape`` undoing both value-rank alignment and broadcasting."""
    target_rank = len(shape) - nb
    g_rank = g.ndim - nb
    padded = shape
    if target_rank < g_rank:
        padded = shape[:nb] + (1,) * (g_rank - target_rank) + shape[nb:]
    axes = tuple(i for i, (gs, ps) in enumerate(zip(g.shape, padded)) if ps == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _as_value(x, nb: int) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    return arr.reshape((1,) * nb + arr.shape)


def _scalar_check(x: np.ndarray, nb: int, what: str) -> None:
    if x.ndim != nb:
        raise ExprError(f"{what} expects scalar operands")


# ---------------------------------------------------------------------------
# evaluation with reverse-mode closures

Backward = Callable[[np.ndarray], None]


def _noop(_g: np.ndarray) -> None:
    return None


def _eval(expr: Expr, ctx: EvalContext, need_grad: bool) -> tuple[np.ndarray, Backward]:
    nb = ctx.nb
    if isinstance(expr, Const):
        return _as_value(expr.value, nb), _noop

    if isinstance(expr, Ref):
        value, key = ctx.gather(expr)
        if not need_grad:
            return value, _noop
        shape = value.shape

        def back_ref(g: np.ndarray) -> None:
            ctx.scatter(expr, key, unbroadcast(g, shape, nb))

        return value, back_ref

    if isinstance(expr, Neg):
        v, b = _eval(expr.arg, ctx, need_grad)
        return -v, (lambda g: b(-g))

    if isinstance(expr, BinOp):
        a, ba = _eval(expr.left, ctx, need_grad)
        c, bc = _eval(expr.right, ctx, need_grad)
        sa, sc = a.shape, c.shape
        a2, c2 = _align(a, c, nb)
        op = expr.op
        if op == "+":
            out = a2 + c2

            def back(g):
                ba(unbroadcast(g, sa, nb))
                bc(unbroadcast(g, sc, nb))

        elif op == "-":
            out = a2 - c2

            def back(g):
                ba(unbroadcast(g, sa, nb))
                bc(unbroadcast(-g, sc, nb))

        elif op == "*":
            out = a2 * c2

            def back(g):
                ba(unbroadcast(g * c2, sa, nb))
                bc(unbroadcast(g * a2, sc, nb))

        elif op == "/":
            out = a2 / c2

            def back(g):
                ba(unbroadcast(g / c2, sa, nb))
                bc(unbroadcast(-g * a2 / c2**2, sc, nb))

        elif op == "^":
            out = np.power(a2, c2)

            def back(g):
                ba(unbroadcast(g * c2 * np.power(a2, c2 - 1.0), sa, nb))
                with np.errstate(divide="ignore", invalid="ignore"):
                    lg = np.where(a2 > 0, np.log(np.where(a2 > 0, a2, 1.0)), 0.0)
                bc(unbroadcast(g * out * lg, sc, nb))

        else:  # pragma: no cover - parser guarantees the operator set
            raise ExprError(f"unknown operator {op!r}")
        return out, back

    if isinstance(expr, Compare):
        a, _ = _eval(expr.left, ctx, False)
        c, _ = _eval(expr.right, ctx, False)
        a2, c2 = _align(a, c, nb)
        return _COMPARE[expr.op](a2, c2).astype(float), _noop

    if isinstance(expr, Call):
        return _eval_call(expr, ctx, need_grad)

    if isinstance(expr, Vector):
        parts = [_eval(item, ctx, need_grad) for item in expr.items]
        vals = [p[0] for p in parts]
        ranks = {_value_rank(v, nb) for v in vals}
        if len(ranks) != 1:
            raise ExprError("vector items must share a shape")
        shape = np.broadcast_shapes(*[v.shape for v in vals])
        out = np.stack([np.broadcast_to(v, shape) for v in vals], axis=nb)
        shapes = [v.shape for v in vals]

        def back_vec(g):
            for j, (_, b) in enumerate(parts):
                b(unbroadcast(np.take(g, j, axis=nb), shapes[j], nb))

        return out, back_vec

    if isinstance(expr, PlateSum):
        inner, axis = ctx.plate_sum(expr.plate)
        v, b = _eval(expr.body, inner, need_grad)
        _scalar_check(v, inner.nb, "sum")
        size = inner.plate_size(expr.plate)
        full = list(v.shape)
        full[axis] = size
        v = np.broadcast_to(v, tuple(full))
        out = v.sum(axis=axis)

        def back_sum(g):
            b(np.broadcast_to(np.expand_dims(g, axis), v.shape))

        return out, back_sum

    raise ExprError(f"cannot evaluate {expr!r}")


def _eval_call(expr: Call, ctx: EvalContext, need_grad: bool):
    nb = ctx.nb
    fn = expr.fn
    args = [_eval(a, ctx, need_grad) for a in expr.args]
    if fn == "exp":
        (x, b), = args
        out = np.exp(x)
        return out, (lambda g: b(g * out))
    if fn == "log":
        (x, b), = args
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(x)
        return out, (lambda g: b(g / x))
    if fn == "sigmoid":
        (x, b), = args
        out = expit(x)
        return out, (lambda g: b(g * out * (1.0 - out)))
    if fn == "ind":
        (x, _), = args
        return (x != 0).astype(float), _noop
    if fn == "pow":
        return _eval(BinOp("^", expr.args[0], expr.args[1]), ctx, need_grad)
    if fn == "dot":
        (a, ba), (c, bc) = args
        if _value_rank(a, nb) != 1 or _value_rank(c, nb) != 1:
            raise ExprError("dot expects two vectors")
        out = np.sum(a * c, axis=-1)
        sa, sc = a.shape, c.shape

        def back(g):
            ge = g[..., None]
            ba(unbroadcast(ge * c, sa, nb))
            bc(unbroadcast(ge * a, sc, nb))

        return out, back
    raise ExprError(f"unknown function {fn!r}")


def forward(expr: Expr, ctx: EvalContext, need_grad: bool = True) -> tuple[np.ndarray, Backward]:
    """Evaluate ``expr`` returning the value and a reverse-mode closure.

    Calling the closure with an upstream gradient of the value's shape pushes
    gradients to the context.
    """
    return _eval(expr, ctx, need_grad)


def evaluate(expr: Expr, ctx: EvalContext) -> np.ndarray:
    """Evaluate ``expr`` in ``ctx``."""
    return _eval(expr, ctx, False)[0]


def vjp(expr: Expr, ctx: EvalContext, upstream) -> np.ndarray:
    """Evaluate ``expr`` and push ``upstream`` gradients back to its references.

    Gradients arrive at the context through :meth:`EvalContext.scatter`.
    Returns the forward value.
    """
    value, back = _eval(expr, ctx, True)
    g = np.broadcast_to(np.asarray(upstream, dtype=float), value.shape)
    back(np.array(g))
    return value


# ---------------------------------------------------------------------------
# forward mode; tangents carry one trailing axis of size T


def _tmul(t: Optional[np.ndarray], v: np.ndarray) -> Optional[np.ndarray]:
    return None if t is None else t * v[..., None]


def _tadd(a: Optional[np.ndarray], b: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def _talign(t: Optional[np.ndarray], own: np.ndarray, other: np.ndarray, nb: int):
    if t is None:
        return None
    diff = _value_rank(other, nb) - _value_rank(own, nb)
    if diff > 0:
        t = t.reshape(t.shape[:nb] + (1,) * diff + t.shape[nb:])
    return t


def jvp(expr: Expr, ctx: EvalContext) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Evaluate ``expr`` with forward-mode tangents.

    Tangents of references come from :meth:`EvalContext.tangent`; the result
    tangent has the value's shape plus one trailing axis, or is None when the
    expression does not depend on any tangent-carrying reference.
    """
    nb = ctx.nb
    if isinstance(expr, Const):
        return _as_value(expr.value, nb), None
    if isinstance(expr, Ref):
        value, key = ctx.gather(expr)
        return value, ctx.tangent(expr, key, value)
    if isinstance(expr, Neg):
        v, t = jvp(expr.arg, ctx)
        return -v, (None if t is None else -t)
    if isinstance(expr, BinOp):
        a, ta = jvp(expr.left, ctx)
        c, tc = jvp(expr.right, ctx)
        ta = _talign(ta, a, c, nb)
        tc = _talign(tc, c, a, nb)
        a2, c2 = _align(a, c, nb)
        op = expr.op
        if op == "+":
            return a2 + c2, _tadd(ta, tc)
        if op == "-":
            return a2 - c2, _tadd(ta, None if tc is None else -tc)
        if op == "*":
            return a2 * c2, _tadd(_tmul(ta, c2), _tmul(tc, a2))
        if op == "/":
            return a2 / c2, _tadd(_tmul(ta, 1.0 / c2), _tmul(tc, -a2 / c2**2))
        out = np.power(a2, c2)
        with np.errstate(divide="ignore", invalid="ignore"):
            lg = np.where(a2 > 0, np.log(np.where(a2 > 0, a2, 1.0)), 0.0)
        return out, _tadd(_tmul(ta, c2 * np.power(a2, c2 - 1.0)), _tmul(tc, out * lg))
    if isinstance(expr, Compare):
        return evaluate(expr, ctx), None
    if isinstance(expr, Call):
        if expr.fn == "pow":
            return jvp(BinOp("^", expr.args[0], expr.args[1]), ctx)
        parts = [jvp(a, ctx) for a in expr.args]
        if expr.fn == "exp":
            (x, t), = parts
            out = np.exp(x)
            return out, _tmul(t, out)
        if expr.fn == "log":
            (x, t), = parts
            with np.errstate(divide="ignore", invalid="ignore"):
                return np.log(x), _tmul(t, 1.0 / x)
        if expr.fn == "sigmoid":
            (x, t), = parts
            out = expit(x)
            return out, _tmul(t, out * (1.0 - out))
        if expr.fn == "ind":
            return evaluate(expr, ctx), None
        if expr.fn == "dot":
            (a, ta), (c, tc) = parts
            out = np.sum(a * c, axis=-1)
            t = _tadd(
                None if ta is None else np.sum(ta * c[..., None], axis=-2),
                None if tc is None else np.sum(tc * a[..., None], axis=-2),
            )
            return out, t
        raise ExprError(f"unknown function {expr.fn!r}")
    if isinstance(expr, Vector):
        parts = [jvp(item, ctx) for item in expr.items]
        vals = [p[0] for p in parts]
        shape = np.broadcast_shapes(*[v.shape for v in vals])
        out = np.stack([np.broadcast_to(v, shape) for v in vals], axis=nb)
        tans = [p[1] for p in parts]
        if all(t is None for t in tans):
            return out, None
        size = next(t.shape[-1] for t in tans if t is not None)
        tshape = shape + (size,)
        stacked = np.stack(
            [np.zeros(tshape) if t is None else np.broadcast_to(t, tshape) for t in tans],
            axis=nb,
        )
        return out, stacked
    if isinstance(expr, PlateSum):
        inner, axis = ctx.plate_sum(expr.plate)
        v, t = jvp(expr.body, inner)
        size = inner.plate_size(expr.plate)
        full = list(v.shape)
        full[axis] = size
        v = np.broadcast_to(v, tuple(full))
        if t is not None:
            t = np.broadcast_to(t, tuple(full) + t.shape[-1:]).sum(axis=axis)
        return v.sum(axis=axis), t
    raise ExprError(f"cannot evaluate {expr!r}")


# ---------------------------------------------------------------------------
# structural helpers


def refs(expr: Expr) -> list[Ref]:
    """All references in ``expr`` (including those inside index expressions)."""
    out: list[Ref] = []

    def walk(e: Expr) -> None:
        if isinstance(e, Ref):
            out.append(e)
            for i in e.index:
                walk(i)
        elif isinstance(e, Neg):
            walk(e.arg)
        elif isinstance(e, (BinOp, Compare)):
            walk(e.left)
            walk(e.right)
        elif isinstance(e, Call):
            for a in e.args:
                walk(a)
        elif isinstance(e, Vector):
            for a in e.items:
                walk(a)
        elif isinstance(e, PlateSum):
            walk(e.body)

    walk(expr)
    return out


def substitute(expr: Expr, fn: Callable[[Ref], Optional[Expr]]) -> Expr:
    """Rebuild ``expr`` replacing references for which ``fn`` returns an expression."""
    if isinstance(expr, Ref):
        index = tuple(substitute(i, fn) for i in expr.index)
        ref = Ref(expr.name, index)
        repl = fn(ref)
        return ref if repl is None else repl
    if isinstance(expr, Neg):
        return Neg(substitute(expr.arg, fn))
    if isinstance(expr, BinOp):
        return BinOp(expr.op, substitute(expr.left, fn), substitute(expr.right, fn))
    if isinstance(expr, Compare):
        return Compare(expr.op, substitute(expr.left, fn), substitute(expr.right, fn))
    if isinstance(expr, Call):
        return Call(expr.fn, tuple(substitute(a, fn) for a in expr.args))
    if isinstance(expr, Vector):
        return Vector(tuple(substitute(a, fn) for a in expr.items))
    if isinstance(expr, PlateSum):
        return PlateSum(expr.plate, substitute(expr.body, fn))
    return expr


_PREC = {"cmp": 1, "+": 2, "-": 2, "*": 3, "/": 3, "neg": 4, "^": 5, "atom": 6}


def _fmt_number(v: float) -> str:
    if float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def to_source(expr: Expr) -> str:
    """Canonical source text; parsing it yields an equal expression."""
    return _src(expr)[0]


def _src(e: Expr) -> tuple[str, int]:
    if isinstance(e, Const):
        if e.value < 0:
            return "-" + _fmt_number(-e.value), _PREC["neg"]
        return _fmt_number(e.value), _PREC["atom"]
    if isinstance(e, Ref):
        if not e.index:
            return e.name, _PREC["atom"]
        return f"{e.name}[{', '.join(to_source(i) for i in e.index)}]", _PREC["atom"]
    if isinstance(e, Neg):
        s, p = _src(e.arg)
        if p <= _PREC["neg"]:
            s = f"({s})"
        return "-" + s, _PREC["neg"]
    if isinstance(e, Compare):
        ls, lp = _src(e.left)
        rs, rp = _src(e.right)
        if lp <= _PREC["cmp"]:
            ls = f"({ls})"
        if rp <= _PREC["cmp"]:
            rs = f"({rs})"
        return f"{ls} {e.op} {rs}", _PREC["cmp"]
    if isinstance(e, BinOp):
        prec = _PREC[e.op]
        ls, lp = _src(e.left)
        rs, rp = _src(e.right)
        if e.op == "^":
            # right associative
            if lp <= prec:
                ls = f"({ls})"
            if rp < prec:
                rs = f"({rs})"
        else:
            if lp < prec:
                ls = f"({ls})"
            if rp <= prec:
                rs = f"({rs})"
        return f"{ls} {e.op} {rs}", prec
    if isinstance(e, Call):
        return f"{e.fn}({', '.join(to_source(a) for a in e.args)})", _PREC["atom"]
    if isinstance(e, Vector):
        return "[" + ", ".join(to_source(a) for a in e.items) + "]", _PREC["atom"]
    if isinstance(e, PlateSum):
        return f"sum({e.plate}, {to_source(e.body)})", _PREC["atom"]
    raise ExprError(f"cannot print {e!r}")


def infer_shape(expr: Expr, shape_of: Callable[[str], tuple]) -> tuple:
    """Static value shape of ``expr`` given the value shapes of referenced nodes."""
    if isinstance(expr, Const):
        return ()
    if isinstance(expr, Ref):
        return tuple(shape_of(expr.name))
    if isinstance(expr, Neg):
        return infer_shape(expr.arg, shape_of)
    if isinstance(expr, (BinOp, Compare)):
        try:
            return np.broadcast_shapes(
                infer_shape(expr.left, shape_of), infer_shape(expr.right, shape_of)
            )
        except ValueError as exc:
            raise ExprError(f"incompatible operand shapes in {to_source(expr)}") from exc
    if isinstance(expr, Call):
        shapes = [infer_shape(a, shape_of) for a in expr.args]
        if expr.fn == "dot":
            if len(shapes[0]) != 1 or shapes[0] != shapes[1]:
                raise ExprError(f"dot expects equal-length vectors in {to_source(expr)}")
            return ()
        if expr.fn == "pow":
            return np.broadcast_shapes(*shapes)
        return shapes[0]
    if isinstance(expr, Vector):
        shapes = [infer_shape(a, shape_of) for a in expr.items]
        if len(set(shapes)) != 1:
            raise ExprError(f"vector items differ in shape in {to_source(expr)}")
        return (len(shapes),) + shapes[0]
    if isinstance(expr, PlateSum):
        inner = infer_shape(expr.body, shape_of)
        if inner != ():
            raise ExprError("sum over a plate expects a scalar body")
        return ()
    raise ExprError(f"cannot infer shape of {expr!r}")
