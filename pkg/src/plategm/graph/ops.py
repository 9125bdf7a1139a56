"""Structural operations on chain graphs with plates.

All operations are pure: they return new graphs.  Operations that change
probability tables (arc reversal, deterministic elimination on table nodes,
component merging) only apply to finite-discrete nodes carrying explicit
tables; for model-file nodes the expressions are rewritten instead where that
is exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import Iterable

import networkx as nx
import numpy as np

from plategm.expfam.families import Domain
from plategm.expr import Const, Ref, substitute
from plategm.graph.tables import Factor
from plategm.graph.types import (
    Arc,
    ChainComponentPartition,
    ChainGraphWithPlates,
    GraphError,
    VariableNode,
    directed_arcs_from_refs,
)

__all__ = [
    "Diagnostic",
    "validate_graph",
    "chain_components",
    "expand_plates",
    "maximal_cliques",
    "markov_blanket",
    "reverse_arc",
    "remove_barren",
    "prune_given",
    "eliminate_deterministic",
    "merge_clique_component",
    "instantiate_optional",
    "deterministic_islands",
]


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str
    nodes: tuple = ()

    def __str__(self) -> str:
        return f"[{self.code}] {self.message}"


def _undirected_graph(g: ChainGraphWithPlates) -> nx.Graph:
    ug = nx.Graph()
    ug.add_nodes_from(g.names)
    ug.add_edges_from(a.endpoints for a in g.arcs if not a.directed)
    return ug


def _component_dag(g: ChainGraphWithPlates, comps: list) -> nx.DiGraph:
    where = {n: i for i, c in enumerate(comps) for n in c}
    dag = nx.DiGraph()
    dag.add_nodes_from(range(len(comps)))
    for a in g.arcs:
        if a.directed and a.src in where and a.dst in where:
            dag.add_edge(where[a.src], where[a.dst])
    return dag


def validate_graph(g: ChainGraphWithPlates) -> list[Diagnostic]:
    """Check the type invariants; an empty list means the graph is valid."""
    out: list[Diagnostic] = []
    names = set()
    for n in g.nodes:
        if n.name in names:
            out.append(Diagnostic("duplicate-node", f"node '{n.name}' declared twice", (n.name,)))
        names.add(n.name)
        if n.deterministic and n.family is not None:
            out.append(Diagnostic("kind", f"deterministic node '{n.name}' has a family", (n.name,)))
        if not n.deterministic and n.expr is not None:
            out.append(Diagnostic("kind", f"stochastic node '{n.name}' has an expression", (n.name,)))
        if n.domain.kind == "discrete" and n.domain.size < 2:
            out.append(Diagnostic("domain", f"node '{n.name}' has arity < 2", (n.name,)))
        if n.domain.kind != "discrete" and n.domain.size < 1:
            out.append(Diagnostic("domain", f"node '{n.name}' has dimension < 1", (n.name,)))
        for p in n.plates:
            if p not in {pl.name for pl in g.plates}:
                out.append(Diagnostic("unknown-plate", f"node '{n.name}' in unknown plate '{p}'", (n.name,)))
    pairs: set = set()
    for a in g.arcs:
        if a.src == a.dst:
            out.append(Diagnostic("self-arc", f"self arc on '{a.src}'", (a.src,)))
            continue
        for e in a.endpoints:
            if e not in names:
                out.append(Diagnostic("unknown-node", f"arc endpoint '{e}' is not a node", (e,)))
        if a.key() in pairs:
            out.append(Diagnostic("multi-arc", f"more than one arc between {a.src} and {a.dst}", a.endpoints))
        pairs.add(a.key())
        if a.optional and not a.directed:
            out.append(Diagnostic("optional-undirected", f"optional arc {a.src} -- {a.dst} must be directed", a.endpoints))
        if not a.directed and a.src in names and a.dst in names:
            if set(g.node(a.src).plates) != set(g.node(a.dst).plates):
                out.append(
                    Diagnostic(
                        "plate-boundary",
                        f"undirected arc {a.src} -- {a.dst} crosses a plate boundary",
                        a.endpoints,
                    )
                )
    if any(d.code == "unknown-node" for d in out):
        return out
    comps = [frozenset(c) for c in nx.connected_components(_undirected_graph(g))]
    where = {n: i for i, c in enumerate(comps) for n in c}
    for a in g.arcs:
        if a.directed and a.src != a.dst and where[a.src] == where[a.dst]:
            out.append(
                Diagnostic("cycle", f"directed arc {a.src} -> {a.dst} inside a chain component", a.endpoints)
            )
    dag = _component_dag(g, comps)
    dag.remove_edges_from([(i, i) for i in range(len(comps))])
    try:
        cycle = nx.find_cycle(dag)
    except nx.NetworkXNoCycle:
        cycle = None
    if cycle:
        members = sorted({n for i, _ in cycle for n in comps[i]})
        out.append(Diagnostic("cycle", "directed cycle through " + ", ".join(members), tuple(members)))
    return out


def chain_components(g: ChainGraphWithPlates) -> ChainComponentPartition:
    """Maximal undirected-connected sets, ordered consistently with directed arcs."""
    order = {n: i for i, n in enumerate(g.names)}
    comps = [frozenset(c) for c in nx.connected_components(_undirected_graph(g))]
    comps.sort(key=lambda c: min(order[n] for n in c))
    dag = _component_dag(g, comps)
    dag.remove_edges_from([(i, i) for i in range(len(comps))])
    try:
        topo = list(nx.lexicographical_topological_sort(dag))
    except nx.NetworkXUnfeasible as exc:
        raise GraphError("directed cycle between chain components", "cycle") from exc
    return ChainComponentPartition(tuple(comps[i] for i in topo))


def _copy_name(name: str, index: tuple) -> str:
    return f"{name}[{','.join(str(i) for i in index)}]" if index else name


def expand_plates(g: ChainGraphWithPlates) -> ChainGraphWithPlates:
    """Replace every plated node by one copy per index tuple."""
    copies: dict[str, list[tuple[tuple, dict]]] = {}
    nodes = []
    for n in g.nodes:
        copies[n.name] = []
        for ix in g.indval(n.name):
            assign = dict(zip(n.plates, ix))
            copies[n.name].append((_copy_name(n.name, ix), assign))
            nodes.append(n.with_(name=_copy_name(n.name, ix), plates=()))
    arcs = []
    for a in g.arcs:
        for sname, sidx in copies[a.src]:
            for dname, didx in copies[a.dst]:
                shared = set(sidx) & set(didx)
                if all(sidx[p] == didx[p] for p in shared):
                    if not a.directed and set(sidx) != set(didx):
                        continue
                    arcs.append(Arc(sname, dname, a.orientation, a.optional, a.log_table, a.potential))
    return ChainGraphWithPlates(tuple(nodes), tuple(arcs), (), ())


def maximal_cliques(g: ChainGraphWithPlates) -> list[tuple]:
    """Maximal cliques of the undirected part, sorted lexicographically.

    Nodes without undirected arcs appear as singleton cliques.
    """
    ug = _undirected_graph(g)
    cliques = [tuple(sorted(c)) for c in nx.find_cliques(ug)]
    return sorted(cliques)


def markov_blanket(g: ChainGraphWithPlates, u: str) -> set[str]:
    """Neighbours, non-deterministic parents and children, and the
    non-deterministic parents of the children's chain components."""
    node = g.node(u)
    if node.deterministic:
        raise GraphError(f"Markov blanket undefined for deterministic node '{u}'", "deterministic", (u,))
    blanket = set(g.neighbors(u)) | g.ndparents(u) | g.ndchildren(u)
    comps = chain_components(g)
    for c in g.ndchildren(u):
        for member in comps.of(c):
            blanket |= g.ndparents(member)
    blanket.discard(u)
    return blanket


# ---------------------------------------------------------------------------
# table operations


def _factor(g: ChainGraphWithPlates, name: str) -> Factor:
    n = g.node(name)
    if n.table is None or n.domain.kind != "discrete":
        raise GraphError(f"node '{name}' has no explicit discrete table", "unsupported", (name,))
    return Factor(tuple(n.table_parents) + (name,), n.table)


def _set_table(node: VariableNode, f: Factor, parents: list) -> VariableNode:
    f = f.reorder(list(parents) + [node.name])
    return node.with_(table=f.table, table_parents=tuple(parents), family="Table", args=())


def _singleton(g: ChainGraphWithPlates, name: str) -> bool:
    return not g.neighbors(name)


def _has_other_path(g: ChainGraphWithPlates, src: str, dst: str) -> bool:
    dg = nx.DiGraph()
    dg.add_nodes_from(g.names)
    dg.add_edges_from(a.endpoints for a in g.arcs if a.directed and a.endpoints != (src, dst))
    return nx.has_path(dg, src, dst)


def reverse_arc(g: ChainGraphWithPlates, a: str, b: str) -> ChainGraphWithPlates:
    """Reverse the directed arc ``b -> a`` by Bayes' theorem.

    Afterwards both nodes share the union of their former parents.
    """
    arc = g.arc(a, b)
    if arc is None or not arc.directed or arc.endpoints != (b, a):
        raise GraphError(f"no directed arc {b} -> {a}", "no-arc", (a, b))
    for x in (a, b):
        if g.node(x).deterministic:
            raise GraphError(f"cannot reverse an arc at deterministic node '{x}'", "unsupported", (x,))
        if not _singleton(g, x):
            raise GraphError(f"node '{x}' is in a non-singleton chain component", "unsupported", (x,))
    if _has_other_path(g, b, a):
        raise GraphError(f"reversing {b} -> {a} would create a cycle", "cycle", (a, b))
    fa, fb = _factor(g, a), _factor(g, b)
    pa_a = [p for p in g.node(a).table_parents if p != b]
    pa_b = list(g.node(b).table_parents)
    shared = pa_b + [p for p in pa_a if p not in pa_b]
    joint = fa * fb
    new_a = joint.marginalize([b])
    denom = new_a.align(list(joint.vars), joint.cards)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond_b = np.where(denom > 0, joint.table / np.where(denom > 0, denom, 1.0), 0.0)
    card_b = joint.cards[b]
    cond_b = np.where(denom > 0, cond_b, 1.0 / card_b)
    new_b = Factor(joint.vars, cond_b)
    na = _set_table(g.node(a), new_a, shared)
    nb = _set_table(g.node(b), new_b, shared + [a])
    arcs = [x for x in g.arcs if x.key() != frozenset((a, b))]
    arcs = [x for x in arcs if not (x.directed and x.dst in (a, b))]
    for p in shared:
        arcs.append(Arc(p, a))
        arcs.append(Arc(p, b))
    arcs.append(Arc(a, b))
    nodes = [na if n.name == a else nb if n.name == b else n for n in g.nodes]
    return ChainGraphWithPlates(tuple(nodes), tuple(arcs), g.plates, g.optional_order)


def remove_barren(g: ChainGraphWithPlates) -> ChainGraphWithPlates:
    """Repeatedly delete unobserved chain components that have no children."""
    while True:
        removed = None
        for comp in chain_components(g):
            if any(g.node(n).observed for n in comp):
                continue
            if any(c not in comp for n in comp for c in g.children(n)):
                continue
            removed = comp
            break
        if removed is None:
            return g
        g = ChainGraphWithPlates(
            tuple(n for n in g.nodes if n.name not in removed),
            tuple(a for a in g.arcs if a.src not in removed and a.dst not in removed),
            g.plates,
            tuple(o for o in g.optional_order if o[0] not in removed and o[1] not in removed),
        )


def prune_given(g: ChainGraphWithPlates) -> ChainGraphWithPlates:
    """Delete arcs that carry no information once observed values are fixed.

    * arcs into an observed singleton whose parents are all observed;
    * an undirected arc whose two endpoints and all common neighbours are
      observed, inside a chain component whose parents are all observed.

    The conditional distribution of the unknowns given the observed nodes is
    unchanged.
    """
    known = g.known
    nodes = list(g.nodes)
    drop: set = set()
    for i, n in enumerate(nodes):
        if not n.observed or n.deterministic or not _singleton(g, n.name):
            continue
        pa = g.parents(n.name)
        if pa and all(p in known for p in pa):
            drop |= {frozenset((p, n.name)) for p in pa}
            if n.table is not None:
                k = n.domain.size
                nodes[i] = n.with_(table=np.full(k, 1.0 / k), table_parents=())
    comps = chain_components(g)
    for a in g.arcs:
        if a.directed or a.src not in known or a.dst not in known:
            continue
        common = set(g.neighbors(a.src)) & set(g.neighbors(a.dst))
        comp = comps.of(a.src)
        comp_parents = {p for m in comp for p in g.parents(m)}
        if common <= known and comp_parents <= known:
            drop.add(a.key())
    arcs = tuple(a for a in g.arcs if a.key() not in drop)
    return ChainGraphWithPlates(tuple(nodes), arcs, g.plates, g.optional_order)


def _det_order(g: ChainGraphWithPlates) -> list[str]:
    det = [n.name for n in g.nodes if n.deterministic]
    dg = nx.DiGraph()
    dg.add_nodes_from(det)
    for a in g.arcs:
        if a.directed and a.src in dg and a.dst in dg:
            dg.add_edge(a.src, a.dst)
    try:
        return list(nx.topological_sort(dg))
    except nx.NetworkXUnfeasible as exc:
        cyc = [e[0] for e in nx.find_cycle(dg)]
        raise GraphError("deterministic cycle through " + ", ".join(cyc), "det-cycle", tuple(cyc)) from exc


def eliminate_deterministic(g: ChainGraphWithPlates) -> ChainGraphWithPlates:
    """Remove unobserved deterministic nodes, composing them into their children.

    Every parent of an eliminated node becomes a parent of its children.
    Table nodes are summed out exactly; expression nodes are substituted
    into the children's arguments (only implicit, un-indexed references can
    be substituted without ambiguity).
    """
    order = _det_order(g)
    for name in reversed(order):
        node = g.node(name)
        if node.observed:
            continue
        g = _eliminate_one(g, node)
    return g


def _eliminate_one(g: ChainGraphWithPlates, det: VariableNode) -> ChainGraphWithPlates:
    name = det.name
    children = g.children(name)
    new_nodes = {}
    for c in children:
        child = g.node(c)
        if det.table is not None and child.table is not None:
            f = _factor(g, c) * Factor(tuple(det.table_parents) + (name,), det.table)
            f = f.marginalize([name])
            parents = [p for p in child.table_parents if p != name]
            parents += [p for p in det.table_parents if p not in parents]
            new_nodes[c] = _set_table(child, f, parents)
            continue
        if det.expr is None:
            raise GraphError(f"cannot compose '{name}' into '{c}'", "unsupported", (name, c))

        def repl(ref: Ref, _n=name, _e=det.expr, _c=c):
            if ref.name != _n:
                return None
            if ref.index:
                raise GraphError(
                    f"indexed reference {_n}[...] in '{_c}' cannot be eliminated",
                    "ambiguous-reinsertion",
                    (_n, _c),
                )
            return _e

        if child.expr is not None:
            new_nodes[c] = child.with_(expr=substitute(child.expr, repl))
        else:
            new_nodes[c] = child.with_(args=tuple(substitute(x, repl) for x in child.args))
    parents = g.parents(name)
    arcs = [a for a in g.arcs if name not in a.endpoints]
    have = {a.key() for a in arcs}
    for c in children:
        for p in parents:
            if frozenset((p, c)) not in have and p != c:
                arcs.append(Arc(p, c))
                have.add(frozenset((p, c)))
    nodes = [new_nodes.get(n.name, n) for n in g.nodes if n.name != name]
    return ChainGraphWithPlates(tuple(nodes), tuple(arcs), g.plates, g.optional_order)


def merge_clique_component(g: ChainGraphWithPlates, names: Iterable[str]) -> ChainGraphWithPlates:
    """Replace a whole chain component by one node over the product domain.

    The merged node's parents and children are the unions of the members'.
    Child tables are re-indexed so the merged value enumerates member values
    in row-major order.
    """
    names = list(names)
    if len(names) == 1:
        return g
    comp = chain_components(g).of(names[0])
    for n in names:
        if n not in comp:
            raise GraphError(f"'{n}' is not in the chain component of '{names[0]}'", "not-clique", (n,))
    for n in comp:
        if n not in names:
            raise GraphError(f"chain component also contains '{n}'", "not-clique", (n,))
    for x, y in product(names, names):
        if x < y and (g.arc(x, y) is None or g.arc(x, y).directed):
            raise GraphError(f"'{x}' and '{y}' are not joined by an undirected arc", "not-clique", (x, y))
    merged = "*".join(names)
    f = Factor((), np.array(1.0))
    for n in names:
        f = f * _factor(g, n)
    for a in g.arcs:
        if not a.directed and a.src in names and a.dst in names:
            f = f * Factor((a.src, a.dst), a.potential)
    parents = []
    for n in names:
        parents += [p for p in g.parents(n) if p not in parents]
    f = f.reorder(parents + names)
    cards = [g.node(n).domain.size for n in names]
    table = f.table.reshape(f.table.shape[: len(parents)] + (-1,))
    table = table / table.sum(axis=-1, keepdims=True)
    new = VariableNode(
        merged,
        observed=all(g.node(n).observed for n in names),
        domain=Domain("discrete", int(np.prod(cards))),
        family="Table",
        plates=g.node(names[0]).plates,
        table=table,
        table_parents=tuple(parents),
    )
    children = []
    for n in names:
        children += [c for c in g.children(n) if c not in children]
    replaced = {}
    for c in children:
        child = g.node(c)
        cf = _factor(g, c)
        others = [p for p in child.table_parents if p not in names]
        # broadcast over members the child did not depend on
        full = cf
        for n in names:
            if n not in cf.vars:
                full = full * Factor((n,), np.ones(g.node(n).domain.size))
        t = full.reorder(others + names + [c]).table
        t = t.reshape(t.shape[: len(others)] + (-1, t.shape[-1]))
        replaced[c] = child.with_(table=t, table_parents=tuple(others + [merged]))
    nodes = []
    for n in g.nodes:
        if n.name == names[0]:
            nodes.append(new)
        elif n.name not in names:
            nodes.append(replaced.get(n.name, n))
    arcs = [a for a in g.arcs if a.src not in names and a.dst not in names]
    arcs += [Arc(p, merged) for p in parents]
    arcs += [Arc(merged, c) for c in children]
    return ChainGraphWithPlates(tuple(nodes), tuple(arcs), g.plates, g.optional_order)


# ---------------------------------------------------------------------------
# model families and deterministic islands


def instantiate_optional(g: ChainGraphWithPlates, bits: int) -> ChainGraphWithPlates:
    """Graph of one family member: optional arc ``i`` present iff bit ``i`` set.

    An absent arc ``u -> v`` replaces every reference to ``u`` in ``v``'s
    arguments by the constant 0, so indexed parameters fall back to copy 0
    and basis features to zero.
    """
    absent = {arc for i, arc in enumerate(g.optional_order) if not (bits >> i) & 1}
    nodes = []
    for n in g.nodes:
        drop = {u for (u, v) in absent if v == n.name}
        if drop:
            def repl(ref: Ref, _drop=drop):
                return Const(0.0) if ref.name in _drop else None

            if n.expr is not None:
                n = n.with_(expr=substitute(n.expr, repl))
            else:
                n = n.with_(args=tuple(substitute(a, repl) for a in n.args))
        nodes.append(n)
    arcs = [a for a in g.arcs if (a.src, a.dst) not in absent]
    return ChainGraphWithPlates(tuple(nodes), tuple(arcs), g.plates, g.optional_order)


def deterministic_islands(g: ChainGraphWithPlates) -> list[frozenset]:
    """Connected groups of deterministic nodes (ignoring arc direction)."""
    det = {n.name for n in g.nodes if n.deterministic}
    ug = nx.Graph()
    ug.add_nodes_from(det)
    ug.add_edges_from(a.endpoints for a in g.arcs if a.src in det and a.dst in det)
    order = {n: i for i, n in enumerate(g.names)}
    islands = [frozenset(c) for c in nx.connected_components(ug)]
    return sorted(islands, key=lambda c: min(order[n] for n in c))


def rebuild_arcs(g: ChainGraphWithPlates) -> ChainGraphWithPlates:
    """Recompute directed arcs from references, keeping undirected arcs and
    optional-arc flags."""
    optional = set(g.optional_order)
    arcs = [
        Arc(a.src, a.dst, optional=(a.src, a.dst) in optional)
        for a in directed_arcs_from_refs(g.nodes)
    ]
    arcs += [a for a in g.arcs if not a.directed]
    return ChainGraphWithPlates(g.nodes, tuple(arcs), g.plates, g.optional_order)
