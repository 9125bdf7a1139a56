import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import load
from plategm.expfam.families import Domain
from plategm.graph import (
    Arc,
    ChainGraphWithPlates,
    Factor,
    GraphError,
    Plate,
    VariableNode,
    chain_components,
    conditional,
    deterministic_islands,
    expand_plates,
    instantiate_optional,
    joint_factor,
    markov_blanket,
    maximal_cliques,
    merge_clique_component,
    prune_given,
    reverse_arc,
    validate_graph,
)

BIN = Domain("discrete", 2)


def node(name, parents=(), table=None, **kw):
    shape = (2,) * (len(parents) + 1)
    if table is None:
        table = np.full(shape, 0.5)
    return VariableNode(name, domain=BIN, family="Table", table=np.asarray(table), table_parents=tuple(parents), **kw)


def undirected(nodes, edges, potentials=None):
    potentials = potentials or {}
    arcs = tuple(Arc(a, b, "undirected", potential=potentials.get((a, b), np.ones((2, 2)))) for a, b in edges)
    return ChainGraphWithPlates(tuple(node(n) for n in nodes), arcs)


def king_grid(k):
    names = [f"x{i}{j}" for i in range(k) for j in range(k)]
    edges = []
    for i, j in itertools.product(range(k), range(k)):
        for di, dj in ((0, 1), (1, 0), (1, 1), (1, -1)):
            a, b = i + di, j + dj
            if 0 <= a < k and 0 <= b < k:
                edges.append((f"x{i}{j}", f"x{a}{b}"))
    return undirected(names, edges)


# ---------------------------------------------------------------------------
# cliques


def test_grid_has_nine_block_cliques():
    cliques = maximal_cliques(king_grid(4))
    assert len(cliques) == 9
    assert all(len(c) == 4 for c in cliques)
    assert cliques == sorted(cliques)
    assert ("x00", "x01", "x10", "x11") in cliques


def test_edge_and_triangle():
    assert maximal_cliques(undirected("ab", [("a", "b")])) == [("a", "b")]
    assert maximal_cliques(undirected("abc", [("a", "b"), ("b", "c"), ("a", "c")])) == [("a", "b", "c")]


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 7).flatmap(lambda n: st.tuples(st.just(n), st.sets(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1))))))
def test_cliques_maximal_and_complete(case):
    n, pairs = case
    names = [f"v{i}" for i in range(n)]
    edges = sorted({tuple(sorted((names[a], names[b]))) for a, b in pairs if a != b})
    g = undirected(names, edges)
    es = {frozenset(e) for e in edges}
    cliques = [set(c) for c in maximal_cliques(g)]
    for c in cliques:
        assert all(frozenset(p) in es for p in itertools.combinations(c, 2))
    for c, d in itertools.permutations(cliques, 2):
        assert not c <= d
    assert set().union(*cliques) == set(names)


# ---------------------------------------------------------------------------
# components and blankets


def test_grid_model_components():
    g = load("grid").graph
    comps = [set(c) for c in chain_components(g)]
    assert {"a", "b", "c", "d"} in comps
    where = {n: i for i, c in enumerate(comps) for n in c}
    for a in g.arcs:
        if a.directed:
            assert where[a.src] < where[a.dst]


def test_blanket_of_bayes_net():
    g = ChainGraphWithPlates(
        (node("a"), node("b"), node("c", ("a", "b")), node("d", ("c",))),
        (Arc("a", "c"), Arc("b", "c"), Arc("c", "d")),
    )
    assert markov_blanket(g, "a") == {"b", "c"}
    assert markov_blanket(g, "c") == {"a", "b", "d"}


def test_blanket_through_chain_component():
    g = ChainGraphWithPlates(
        (node("w"), node("v"), node("y", ("w",)), node("z", ("v",))),
        (Arc("w", "y"), Arc("v", "z"), Arc("y", "z", "undirected", potential=np.ones((2, 2)))),
    )
    assert markov_blanket(g, "w") == {"y", "v"}
    assert markov_blanket(g, "y") == {"w", "z"}


def test_blanket_looks_through_deterministic_nodes():
    g = ChainGraphWithPlates(
        (node("a"), VariableNode("s", kind="deterministic", domain=BIN), node("c", ("s",))),
        (Arc("a", "s"), Arc("s", "c")),
    )
    assert markov_blanket(g, "a") == {"c"}
    with pytest.raises(GraphError):
        markov_blanket(g, "s")


def test_blanket_is_sufficient_by_enumeration(rng):
    tabs = {
        "a": rng.dirichlet([1, 1]),
        "b": rng.dirichlet([1, 1], size=2),
        "c": rng.dirichlet([1, 1], size=(2, 2)),
        "d": rng.dirichlet([1, 1], size=2),
    }
    g = ChainGraphWithPlates(
        (node("a", (), tabs["a"]), node("b", ("a",), tabs["b"]), node("c", ("a", "b"), tabs["c"]), node("d", ("c",), tabs["d"])),
        (Arc("a", "b"), Arc("a", "c"), Arc("b", "c"), Arc("c", "d")),
    )
    joint = joint_factor(g)
    blanket = markov_blanket(g, "b")
    rest = [v for v in joint.vars if v not in blanket | {"b"}]
    for cfg in itertools.product(range(2), repeat=len(joint.vars) - 1):
        given = dict(zip([v for v in joint.vars if v != "b"], cfg))
        full = conditional(joint, ["b"], given).table
        part = conditional(joint, ["b"], {k: v for k, v in given.items() if k not in rest}).table
        np.testing.assert_allclose(full, part, atol=1e-12)


# ---------------------------------------------------------------------------
# validation and plates


@pytest.mark.parametrize(
    "arcs,code",
    [
        ((Arc("a", "a"),), "self-arc"),
        ((Arc("a", "b"), Arc("b", "a")), "multi-arc"),
        ((Arc("a", "b"), Arc("b", "c"), Arc("c", "a")), "cycle"),
        ((Arc("a", "b", "undirected"), Arc("a", "b", "directed", optional=True)), "multi-arc"),
        ((Arc("a", "z"),), "unknown-node"),
        ((Arc("a", "b", "undirected", optional=True),), "optional-undirected"),
    ],
)
def test_validate_graph(arcs, code):
    g = ChainGraphWithPlates((node("a"), node("b"), node("c")), arcs)
    assert code in {d.code for d in validate_graph(g)}


def test_directed_arc_inside_component():
    g = ChainGraphWithPlates(
        (node("a"), node("b")), (Arc("a", "b", "undirected"), Arc("b", "a"))
    )
    assert {d.code for d in validate_graph(g)} >= {"multi-arc"}
    g2 = undirected("abc", [("a", "b"), ("b", "c")]).with_arcs(
        (Arc("a", "b", "undirected"), Arc("b", "c", "undirected"), Arc("a", "c"))
    )
    assert "cycle" in {d.code for d in validate_graph(g2)}


def test_plate_boundary():
    g = ChainGraphWithPlates(
        (node("a"), node("b", plates=("i",))), (Arc("a", "b", "undirected"),), (Plate("i", 3),)
    )
    assert "plate-boundary" in {d.code for d in validate_graph(g)}


def test_corpus_graphs_are_valid():
    for name in ("coin", "mixture", "grid", "medical", "hetero", "ffnet", "four_var_family"):
        assert validate_graph(load(name).graph) == []


def test_expand_plates():
    g = ChainGraphWithPlates(
        (node("t"), node("x", ("t",), plates=("i",))),
        (Arc("t", "x"),),
        (Plate("i", 3),),
    )
    e = expand_plates(g)
    assert sorted(e.names) == ["t", "x[0]", "x[1]", "x[2]"]
    assert len(e.arcs) == 3 and all(a.src == "t" for a in e.arcs)


def test_expand_plates_keeps_links_inside_copies():
    g = ChainGraphWithPlates(
        (node("a", plates=("i",)), node("b", plates=("i",))),
        (Arc("a", "b", "undirected"),),
        (Plate("i", 2),),
    )
    e = expand_plates(g)
    assert {a.endpoints for a in e.arcs} == {("a[0]", "b[0]"), ("a[1]", "b[1]")}


def test_unbound_plate():
    g = ChainGraphWithPlates((node("x", plates=("i",)),), (), (Plate("i"),))
    with pytest.raises(GraphError):
        expand_plates(g)


# ---------------------------------------------------------------------------
# table operations


def test_reverse_arc_rejects_cycles_and_missing_arcs():
    g = ChainGraphWithPlates(
        (node("a"), node("b", ("a",)), node("c", ("a", "b"))),
        (Arc("a", "b"), Arc("a", "c"), Arc("b", "c")),
    )
    with pytest.raises(GraphError) as err:
        reverse_arc(g, "c", "a")
    assert err.value.code == "cycle"
    with pytest.raises(GraphError):
        reverse_arc(g, "a", "c")


def test_reverse_arc_gives_union_of_parents(rng):
    g = ChainGraphWithPlates(
        (node("p"), node("q"), node("a", ("p",), rng.dirichlet([1, 1], size=2)), node("b", ("a", "q"), rng.dirichlet([1, 1], size=(2, 2)))),
        (Arc("p", "a"), Arc("a", "b"), Arc("q", "b")),
    )
    r = reverse_arc(g, "b", "a")
    assert set(r.parents("b")) == {"p", "q"}
    assert set(r.parents("a")) == {"p", "q", "b"}
    np.testing.assert_allclose(joint_factor(g).table, joint_factor(r).table, atol=1e-12)


def test_prune_three_clique():
    g = undirected("abc", [("a", "b"), ("b", "c"), ("a", "c")])
    kept = {a.key() for a in prune_given(g.observe(["c"])).arcs}
    assert frozenset("ab") in kept
    assert prune_given(g.observe("abc")).arcs == ()
    partial = {a.key() for a in prune_given(g.observe("ab")).arcs}
    assert frozenset("ab") in partial


def test_prune_three_clique_conditional(rng):
    pots = {e: rng.uniform(0.2, 3.0, size=(2, 2)) for e in [("a", "b"), ("b", "c"), ("a", "c")]}
    g = undirected("abc", list(pots), pots)
    for obs in (["c"], ["a", "b"]):
        go = g.observe(obs)
        j0, j1 = joint_factor(go), joint_factor(prune_given(go))
        unknown = [v for v in "abc" if v not in obs]
        for cfg in itertools.product(range(2), repeat=len(obs)):
            given = dict(zip(obs, cfg))
            np.testing.assert_allclose(conditional(j0, unknown, given).table, conditional(j1, unknown, given).table, atol=1e-12)


def test_merge_clique_component_preserves_joint(rng):
    pot = rng.uniform(0.5, 2.0, size=(2, 2))
    g = ChainGraphWithPlates(
        (node("p", (), [0.3, 0.7]), node("a", ("p",), rng.dirichlet([1, 1], size=2)), node("b"), node("c", ("a",), rng.dirichlet([1, 1], size=2))),
        (Arc("p", "a"), Arc("a", "b", "undirected", potential=pot), Arc("a", "c")),
    )
    m = merge_clique_component(g, ["a", "b"])
    assert "a*b" in m.names
    jg = joint_factor(g).reorder(["p", "a", "b", "c"]).table
    jm = joint_factor(m).reorder(["p", "a*b", "c"]).table
    np.testing.assert_allclose(jg.reshape(2, 4, 2), jm, atol=1e-12)


def test_merge_rejects_non_clique():
    g = undirected("abc", [("a", "b"), ("b", "c")])
    with pytest.raises(GraphError):
        merge_clique_component(g, ["a", "b", "c"])


def test_factor_algebra():
    f = Factor(("x", "y"), np.arange(6.0).reshape(2, 3))
    g = Factor(("y",), np.array([1.0, 2.0, 3.0]))
    h = f * g
    np.testing.assert_allclose(h.table, np.arange(6.0).reshape(2, 3) * [1, 2, 3])
    np.testing.assert_allclose(h.marginalize(["x"]).table, [3 * 1, 5 * 2, 7 * 3])
    assert h.reorder(["y", "x"]).table.shape == (3, 2)


# ---------------------------------------------------------------------------
# model families and islands


def test_instantiate_optional_drops_absent_arcs():
    g = load("four_var_family").graph
    n = len(g.optional_order)
    empty = instantiate_optional(g, 0)
    full = instantiate_optional(g, (1 << n) - 1)
    opt = set(g.optional_order)
    assert not opt & {a.endpoints for a in empty.arcs}
    assert opt <= {a.endpoints for a in full.arcs}


def test_deterministic_islands_of_ffnet():
    g = load("ffnet").graph
    islands = deterministic_islands(g)
    det = {n.name for n in g.nodes if n.deterministic}
    assert set().union(*islands) == det
    assert all(i.isdisjoint(j) for i, j in itertools.combinations(islands, 2))
