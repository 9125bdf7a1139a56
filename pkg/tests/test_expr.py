import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plategm.expr import (
    BinOp,
    Call,
    Const,
    EvalContext,
    ExprError,
    Ref,
    Vector,
    evaluate,
    infer_shape,
    jvp,
    refs,
    substitute,
    to_source,
    vjp,
)
from plategm.io.dsl import parse_model


class DictContext(EvalContext):
    """Unbatched context over a dict of values, collecting gradients."""

    def __init__(self, values, tangents=None):
        self.values = {k: np.asarray(v, dtype=float) for k, v in values.items()}
        self.tangents = tangents or {}
        self.grads = {}

    def gather(self, ref):
        v = self.values[ref.name]
        if ref.index:
            idx = tuple(int(evaluate(i, self)) for i in ref.index)
            return v[idx], (ref.name, idx)
        return v, (ref.name, ())

    def scatter(self, ref, key, grad):
        name, idx = key
        g = self.grads.setdefault(name, np.zeros_like(self.values[name]))
        if idx:
            g[idx] += grad
        else:
            g += grad

    def tangent(self, ref, key, value):
        t = self.tangents.get(ref.name)
        return None if t is None else np.asarray(t, dtype=float)


def parse_expr(src: str):
    return parse_model(f"y := {src}").statements[0].expr


@pytest.mark.parametrize(
    "src, values, expected",
    [
        ("a + b * c", {"a": 1, "b": 2, "c": 3}, 7.0),
        ("(a + b) * c", {"a": 1, "b": 2, "c": 3}, 9.0),
        ("a ^ b ^ c", {"a": 2, "b": 3, "c": 2}, 512.0),
        ("-a ^ 2", {"a": 3}, -9.0),
        ("exp(log(a))", {"a": 2.5}, 2.5),
        ("sigmoid(a)", {"a": 0.0}, 0.5),
        ("dot(v, [1, 2, 3])", {"v": [1, 1, 1]}, 6.0),
        ("ind(a > 1)", {"a": 2}, 1.0),
        ("pow(a, 3)", {"a": 2}, 8.0),
        ("v[1] / 4", {"v": [0, 8, 0]}, 2.0),
    ],
)
def test_evaluate(src, values, expected):
    assert evaluate(parse_expr(src), DictContext(values)) == pytest.approx(expected)


@pytest.mark.parametrize("src", ["a * b + exp(c)", "sigmoid(a * b) - c ^ 2", "dot(v, [a, b, c])", "log(a) / (b + 2)"])
def test_vjp_matches_jvp_and_finite_differences(src):
    e = parse_expr(src)
    vals = {"a": 0.7, "b": -0.3, "c": 0.4, "v": [0.2, -0.5, 1.5]}
    ctx = DictContext(vals)
    vjp(e, ctx, 1.0)
    for name in ("a", "b", "c"):
        tang = {name: np.ones(1)}
        _, t = jvp(e, DictContext(vals, tang))
        g = ctx.grads.get(name, 0.0)
        t = 0.0 if t is None else np.ravel(t)[0]
        assert t == pytest.approx(float(g), rel=1e-12, abs=1e-14)
        hi = dict(vals, **{name: vals[name] + 1e-6})
        lo = dict(vals, **{name: vals[name] - 1e-6})
        fd = (evaluate(e, DictContext(hi)) - evaluate(e, DictContext(lo))) / 2e-6
        assert float(g) == pytest.approx(float(fd), rel=1e-6, abs=1e-8)


def test_refs_and_substitute():
    e = parse_expr("a * b[i] + a")
    assert sorted(r.name for r in refs(e)) == ["a", "a", "b", "i"]
    out = substitute(e, lambda r: Const(2.0) if r.name == "a" else None)
    assert "a" not in {r.name for r in refs(out)}


@pytest.mark.parametrize("src", ["a + b * c", "(a + b) * c", "a - (b - c)", "a ^ b ^ c", "(a ^ b) ^ c", "-(a + b)", "f[1, 2] * [1, x]", "sum(k, m[k])"])
def test_to_source_round_trip(src):
    e = parse_expr(src)
    assert parse_expr(to_source(e)) == e


_leaf = st.one_of(
    st.sampled_from([Ref("a"), Ref("b")]),
    st.floats(min_value=-5, max_value=5, allow_nan=False).map(lambda v: Const(round(v, 3))),
)
_exprs = st.recursive(
    _leaf,
    lambda kids: st.one_of(
        st.tuples(st.sampled_from("+-*/^"), kids, kids).map(lambda t: BinOp(t[0], t[1], t[2])),
        kids.map(lambda k: Call("exp", (k,))),
    ),
    max_leaves=8,
)


@settings(max_examples=200, deadline=None)
@given(_exprs)
def test_printer_round_trip_property(e):
    assert parse_expr(to_source(e)) == parse_expr(to_source(parse_expr(to_source(e))))


def test_infer_shape():
    shapes = {"w": (3,), "x": ()}
    assert infer_shape(parse_expr("dot(w, [1, x, x])"), shapes.get) == ()
    assert infer_shape(parse_expr("w * x"), shapes.get) == (3,)
    with pytest.raises(ExprError):
        infer_shape(parse_expr("dot(w, [1, x])"), shapes.get)


def test_vector_shape():
    assert infer_shape(Vector((Const(1.0), Ref("x"))), {"x": ()}.get) == (2,)
