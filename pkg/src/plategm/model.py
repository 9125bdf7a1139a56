"""Executable models: building graphs from model programs and binding data.

:func:`build_model` turns a parsed :class:`~plategm.io.dsl.ModelSpec` into a
:class:`Model` (graph plus per-node families, value shapes and observation
bindings).  :func:`bind_data` attaches a :class:`~plategm.io.data.DataTable`,
fixing data-plate sizes and registering missing cells, and returns a
:class:`BoundModel` on which all inference runs.

Variable values live in a *state*: a dict from node name to an array of shape
``plate sizes + value shape`` (plates in the node's nesting order).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from functools import cached_property
from typing import Optional

import networkx as nx
import numpy as np

from plategm.expfam.families import Domain, Family, SupportError, make_family
from plategm.expr import (
    Call,
    Compare,
    ExprError,
    PlateSum,
    Ref,
    Vector,
    evaluate,
    infer_shape,
    refs,
)
from plategm.graph.ops import chain_components, instantiate_optional, validate_graph
from plategm.graph.types import Arc, ChainGraphWithPlates, Plate, VariableNode
from plategm.io.data import DataError, DataTable
from plategm.io.dsl import (
    ConstDecl,
    LinkDecl,
    ModelError,
    ModelSpec,
    NodeDecl,
    ObserveDecl,
    OptionalDecl,
    PlateDecl,
    parse_model,
)

__all__ = ["Model", "BoundModel", "Link", "build_model", "bind_data", "load_model", "simulate_data"]


@dataclass(frozen=True)
class Link:
    """Pairwise log-potential between two discrete nodes (row-major table)."""

    a: str
    b: str
    table: tuple


@dataclass(frozen=True)
class Model:
    """A model program compiled to a graph with families and shapes."""

    graph: ChainGraphWithPlates
    families: dict
    shapes: dict
    consts: dict
    columns: dict
    links: tuple = ()
    data_plates: frozenset = frozenset()
    positions: dict = field(default_factory=dict, compare=False)
    source: str = field(default="", compare=False)

    @property
    def optional_arcs(self) -> tuple:
        return self.graph.optional_order

    def node(self, name: str) -> VariableNode:
        return self.graph.node(name)

    def instantiate(self, bits: int) -> "Model":
        """The family member with optional arc ``i`` present iff bit ``i`` is set."""
        return replace(self, graph=instantiate_optional(self.graph, bits))

    @property
    def full_bits(self) -> int:
        return (1 << len(self.optional_arcs)) - 1


# ---------------------------------------------------------------------------
# building


def _err(code: str, msg: str, pos=(0, 0)) -> ModelError:
    return ModelError(code, msg, pos[0], pos[1])


def load_model(text: str) -> "Model":
    """Parse and build a model program."""
    return build_model(parse_model(text), source=text)


def build_model(spec: ModelSpec, source: str = "") -> Model:
    """Resolve names, infer shapes and families, and assemble the graph."""
    consts: dict[str, float] = {}
    plates: dict[str, PlateDecl] = {}
    decls: dict[str, tuple[NodeDecl, tuple]] = {}
    links: list[LinkDecl] = []
    optionals: list[OptionalDecl] = []
    observes: list[ObserveDecl] = []
    positions: dict[str, tuple] = {}

    def claim(name: str, pos) -> None:
        if name in positions:
            raise _err("name", f"'{name}' is declared more than once", pos)
        positions[name] = pos

    for stmt, encl in spec.walk():
        if isinstance(stmt, ConstDecl):
            claim(stmt.name, stmt.pos)
            consts[stmt.name] = stmt.value
        elif isinstance(stmt, PlateDecl):
            claim(stmt.name, stmt.pos)
            plates[stmt.name] = stmt
        elif isinstance(stmt, NodeDecl):
            claim(stmt.name, stmt.pos)
            decls[stmt.name] = (stmt, encl)
        elif isinstance(stmt, LinkDecl):
            links.append(stmt)
        elif isinstance(stmt, OptionalDecl):
            optionals.append(stmt)
        elif isinstance(stmt, ObserveDecl):
            observes.append(stmt)

    sizes: dict[str, Optional[int]] = {}
    data_plates = set()
    for p in plates.values():
        if isinstance(p.size, int):
            sizes[p.name] = p.size
        elif p.size in consts:
            v = consts[p.size]
            if not float(v).is_integer() or v < 1:
                raise _err("type", f"plate '{p.name}' size must be a positive integer", p.pos)
            sizes[p.name] = int(v)
        elif p.size in positions:
            raise _err("name", f"plate size '{p.size}' is not a constant", p.pos)
        else:
            sizes[p.name] = None
            data_plates.add(p.name)

    # validate references and collect dependencies
    deps: dict[str, set] = {}
    for name, (d, encl) in decls.items():
        exprs = [d.expr] if d.deterministic else list(d.args)
        deps[name] = set()
        for e in exprs:
            _check_refs(e, set(encl), decls, consts, plates, d.pos)
            deps[name] |= {r.name for r in refs(e) if r.name in decls}
        deps[name].discard(name)
        if name in {r.name for e in exprs for r in refs(e)}:
            raise _err("cycle", f"'{name}' refers to itself", d.pos)
    dg = nx.DiGraph()
    dg.add_nodes_from(decls)
    dg.add_edges_from((p, c) for c, ps in deps.items() for p in ps)
    try:
        order = list(nx.topological_sort(dg))
    except nx.NetworkXUnfeasible:
        cyc = [e[0] for e in nx.find_cycle(dg)]
        raise _err("cycle", "circular definitions through " + ", ".join(cyc), decls[cyc[0]][0].pos) from None

    shapes: dict[str, tuple] = {}
    families: dict[str, Family] = {}
    domains: dict[str, Domain] = {}

    def shape_of(n: str) -> tuple:
        if n in consts or n in plates:
            return ()
        return shapes[n]

    for name in order:
        d, encl = decls[name]
        try:
            if d.deterministic:
                shp = infer_shape(d.expr, shape_of)
                shapes[name] = tuple(shp)
                dom = _det_domain(d.expr, shp)
                domains[name] = dom
                continue
            arg_shapes = [tuple(infer_shape(a, shape_of)) for a in d.args]
            fam = _family(d, decls, domains)
            if len(d.args) != fam.n_args:
                raise _err("arity", f"{d.family} takes {fam.n_args} argument(s), got {len(d.args)}", d.pos)
            for j, (r, s) in enumerate(zip(fam.arg_ranks, arg_shapes)):
                if r is not None and len(s) != r:
                    raise _err("type", f"argument {j + 1} of {d.family} must have rank {r}", d.pos)
            dom = fam.domain(arg_shapes)
        except SupportError as exc:
            raise _err("type", f"'{name}': {exc}", d.pos) from None
        except ExprError as exc:
            raise _err("type", f"'{name}': {exc}", d.pos) from None
        if _only_consts(d.args, consts):
            vals = [evaluate(a, _ConstCtx(consts)) for a in d.args]
            try:
                fam.check_args(vals, 0)
            except SupportError as exc:
                raise _err("type", f"'{name}': {exc}", d.pos) from None
        families[name] = fam
        domains[name] = dom
        shapes[name] = dom.shape

    columns: dict[str, str] = {}
    for ob in observes:
        if ob.name not in decls:
            raise _err("name", f"cannot observe unknown node '{ob.name}'", ob.pos)
        if decls[ob.name][0].deterministic:
            raise _err("type", f"deterministic node '{ob.name}' cannot be observed", ob.pos)
        if ob.name in columns:
            raise _err("name", f"node '{ob.name}' observed twice", ob.pos)
        columns[ob.name] = ob.column

    nodes = []
    for name, (d, encl) in decls.items():
        nodes.append(
            VariableNode(
                name,
                kind="deterministic" if d.deterministic else "stochastic",
                observed=name in columns,
                domain=domains[name],
                family=None if d.deterministic else d.family,
                args=() if d.deterministic else tuple(d.args),
                expr=d.expr,
                plates=tuple(encl),
            )
        )
    arcs: dict = {}
    for n in nodes:
        for p in sorted(deps[n.name]):
            arcs[frozenset((p, n.name))] = Arc(p, n.name)
    link_objs = []
    for lk in links:
        for x in (lk.a, lk.b):
            if x not in decls:
                raise _err("name", f"link endpoint '{x}' is not a node", lk.pos)
            if not domains[x].is_discrete or decls[x][0].deterministic:
                raise _err("type", f"link endpoint '{x}' must be a discrete stochastic node", lk.pos)
        if lk.a == lk.b:
            raise _err("type", "link joins a node to itself", lk.pos)
        key = frozenset((lk.a, lk.b))
        if key in arcs:
            raise _err("type", f"'{lk.a}' and '{lk.b}' are already joined", lk.pos)
        ka, kb = domains[lk.a].size, domains[lk.b].size
        if len(lk.table) != ka * kb:
            raise _err("arity", f"link table needs {ka * kb} entries, got {len(lk.table)}", lk.pos)
        if set(decls[lk.a][1]) != set(decls[lk.b][1]):
            raise _err("plate-boundary", f"link {lk.a} -- {lk.b} crosses a plate boundary", lk.pos)
        for e in lk.table:
            _check_refs(e, set(decls[lk.a][1]), decls, consts, plates, lk.pos)
            if infer_shape(e, shape_of) != ():
                raise _err("type", "link table entries must be scalars", lk.pos)
        arcs[key] = Arc(lk.a, lk.b, "undirected", log_table=tuple(lk.table))
        link_objs.append(Link(lk.a, lk.b, tuple(lk.table)))
        for e in lk.table:
            for r in refs(e):
                if r.name in decls:
                    for x in (lk.a, lk.b):
                        arcs.setdefault(frozenset((r.name, x)), Arc(r.name, x))
    opt_order = []
    for op in optionals:
        key = frozenset((op.src, op.dst))
        arc = arcs.get(key)
        if arc is None or not arc.directed or (arc.src, arc.dst) != (op.src, op.dst):
            raise _err(
                "name", f"optional arc {op.src} -> {op.dst} must match a reference of '{op.src}' in '{op.dst}'", op.pos
            )
        if (op.src, op.dst) in opt_order:
            raise _err("name", f"optional arc {op.src} -> {op.dst} declared twice", op.pos)
        arcs[key] = replace(arc, optional=True)
        opt_order.append((op.src, op.dst))

    plate_objs = tuple(
        Plate(p, sizes[p], None if sizes[p] is not None else str(plates[p].size)) for p in plates
    )
    g = ChainGraphWithPlates(tuple(nodes), tuple(arcs.values()), plate_objs, tuple(opt_order))
    diags = validate_graph(g)
    if diags:
        d0 = diags[0]
        pos = positions.get(d0.nodes[0], (0, 0)) if d0.nodes else (0, 0)
        raise _err(d0.code, d0.message, pos)
    return Model(
        g,
        families,
        shapes,
        dict(consts),
        columns,
        tuple(link_objs),
        frozenset(data_plates),
        positions,
        source,
    )


class _ConstCtx:
    nb = 0

    def __init__(self, consts):
        self.consts = consts

    def gather(self, ref):
        return np.asarray(float(self.consts[ref.name])), None


def _only_consts(exprs, consts) -> bool:
    return all(r.name in consts and not r.index for e in exprs for r in refs(e)) and not any(
        _has_sum(e) for e in exprs
    )


def _has_sum(e) -> bool:
    if isinstance(e, PlateSum):
        return True
    for f in fields(e):
        v = getattr(e, f.name)
        items = v if isinstance(v, tuple) else (v,)
        for it in items:
            if hasattr(it, "__dataclass_fields__") and _has_sum(it):
                return True
    return False


def _det_domain(expr, shape) -> Domain:
    if isinstance(expr, Compare) or (isinstance(expr, Call) and expr.fn == "ind"):
        return Domain("discrete", 2)
    if len(shape) == 0:
        return Domain("real")
    if len(shape) == 1:
        return Domain("real-vector", shape[0])
    return Domain("positive-definite-matrix", shape[0])


def _family(d: NodeDecl, decls, domains) -> Family:
    if d.family != "Table":
        return make_family(d.family)
    if len(d.args) != 2 or not isinstance(d.args[0], Vector) or not isinstance(d.args[1], Vector):
        raise _err("type", "Table expects Table([parents...], [probabilities...])", d.pos)
    arities = []
    for item in d.args[0].items:
        if not isinstance(item, Ref) or item.name not in domains or not domains[item.name].is_discrete:
            raise _err("type", "Table parents must be discrete nodes", d.pos)
        arities.append(domains[item.name].size)
    return make_family("Table", parent_arities=tuple(arities), n_probs=len(d.args[1].items))


def _check_refs(e, bound: set, decls, consts, plates, pos) -> None:
    """Resolve names and check index counts of every reference in ``e``."""

    def walk(x, bound):
        if isinstance(x, PlateSum):
            if x.plate not in plates:
                raise _err("name", f"unknown plate '{x.plate}' in sum", pos)
            if x.plate in bound:
                raise _err("name", f"plate '{x.plate}' is already bound here", pos)
            walk(x.body, bound | {x.plate})
            return
        if isinstance(x, Ref):
            n = x.name
            if n in consts:
                if x.index:
                    raise _err("type", f"constant '{n}' cannot be indexed", pos)
            elif n in plates:
                if n not in bound:
                    raise _err("name", f"plate index '{n}' used outside its plate", pos)
                if x.index:
                    raise _err("type", f"plate index '{n}' cannot be indexed", pos)
            elif n in decls:
                target = decls[n][1]
                free = [p for p in target if p not in bound]
                if len(x.index) != len(free):
                    raise _err(
                        "type",
                        f"reference to '{n}' needs {len(free)} index(es) for plates {free}, got {len(x.index)}",
                        pos,
                    )
                for ie in x.index:
                    walk(ie, bound)
            else:
                raise _err("name", f"unknown name '{n}'", pos)
            return
        for f in fields(x):
            v = getattr(x, f.name)
            for it in v if isinstance(v, tuple) else (v,):
                if hasattr(it, "__dataclass_fields__"):
                    walk(it, bound)

    walk(e, bound)


# ---------------------------------------------------------------------------
# data binding


@dataclass
class BoundModel:
    """A model with plate sizes fixed and observed values attached.

    ``observed`` holds full arrays for observed nodes (NaN where missing) and
    ``missing`` the matching boolean masks (plate shape).
    """

    model: Model
    plate_sizes: dict
    observed: dict
    missing: dict
    data: Optional[DataTable] = None

    # -- basic lookups ------------------------------------------------------
    @property
    def graph(self) -> ChainGraphWithPlates:
        return self.model.graph

    @cached_property
    def sized_graph(self) -> ChainGraphWithPlates:
        plates = tuple(replace(p, size=self.plate_sizes[p.name]) for p in self.graph.plates)
        return replace(self.graph, plates=plates)

    def node(self, name: str) -> VariableNode:
        return self.model.graph.node(name)

    def family(self, name: str) -> Family:
        return self.model.families[name]

    def plate_size(self, plate: str) -> int:
        return self.plate_sizes[plate]

    def plate_shape(self, name: str) -> tuple:
        return tuple(self.plate_sizes[p] for p in self.node(name).plates)

    def full_shape(self, name: str) -> tuple:
        return self.plate_shape(name) + tuple(self.model.shapes[name])

    def in_data_plate(self, name: str) -> bool:
        return any(p in self.model.data_plates for p in self.node(name).plates)

    @cached_property
    def components(self) -> tuple:
        """Chain components of stochastic nodes, each as a sorted tuple."""
        comps = chain_components(self.graph)
        out = []
        for c in comps:
            names = [n for n in self.graph.names if n in c and not self.node(n).deterministic]
            if names:
                out.append(tuple(names))
        return tuple(out)

    @cached_property
    def component_of(self) -> dict:
        return {n: c for c in self.components for n in c}

    @cached_property
    def links_of(self) -> dict:
        out: dict = {}
        for lk in self.model.links:
            out.setdefault(self.component_of[lk.a], []).append(lk)
        return out

    @cached_property
    def stochastic(self) -> tuple:
        return tuple(n.name for n in self.graph.nodes if not n.deterministic)

    @cached_property
    def deterministic(self) -> tuple:
        return tuple(n.name for n in self.graph.nodes if n.deterministic)

    def has_missing(self, name: str) -> bool:
        m = self.missing.get(name)
        return m is not None and bool(m.any())

    @cached_property
    def unknowns(self) -> tuple:
        """Stochastic nodes with at least one unknown cell."""
        return tuple(
            n for n in self.stochastic if not self.node(n).observed or self.has_missing(n)
        )

    @cached_property
    def parameters(self) -> tuple:
        """Unobserved continuous nodes outside data plates."""
        return tuple(
            n
            for n in self.unknowns
            if not self.node(n).observed
            and not self.node(n).domain.is_discrete
            and not self.in_data_plate(n)
        )

    @cached_property
    def discrete_unknowns(self) -> tuple:
        return tuple(n for n in self.unknowns if self.node(n).domain.is_discrete)

    @cached_property
    def case_unknowns(self) -> tuple:
        """Unknown nodes (latent or with missing cells) inside data plates."""
        return tuple(n for n in self.unknowns if self.in_data_plate(n))

    @cached_property
    def topo_order(self) -> tuple:
        dg = nx.DiGraph()
        dg.add_nodes_from(self.graph.names)
        dg.add_edges_from(a.endpoints for a in self.graph.arcs if a.directed)
        return tuple(nx.lexicographical_topological_sort(dg))

    def instantiate(self, bits: int) -> "BoundModel":
        return BoundModel(self.model.instantiate(bits), self.plate_sizes, self.observed, self.missing, self.data)

    # -- states --------------------------------------------------------------
    def observed_state(self) -> dict:
        """State with observed values filled (missing cells hold NaN)."""
        return {k: v.copy() for k, v in self.observed.items()}

    def initial_state(self, rng: np.random.Generator) -> dict:
        """Fill every unknown: parameters and missing cells from prior
        (predictive) draws in topological order, latent discrete nodes with
        uniform labels."""
        from plategm.semantics import node_args

        state = self.observed_state()
        for name in self.topo_order:
            node = self.node(name)
            if node.deterministic:
                continue
            if node.observed and not self.has_missing(name):
                continue
            shape = self.full_shape(name)
            if node.domain.is_discrete and self.in_data_plate(name) and not node.observed:
                draw = rng.integers(0, node.domain.size, size=self.plate_shape(name)).astype(float)
            else:
                args = node_args(self, state, name)
                nb = len(node.plates)
                ps = self.plate_shape(name)
                args = [np.broadcast_to(a, ps + a.shape[nb:]) for a in args]
                draw = self.family(name).sample(rng, args, len(node.plates))
                draw = np.broadcast_to(draw, shape).copy()
            if node.observed:
                m = self.missing[name]
                cur = state[name]
                cur[m] = draw[m]
            else:
                state[name] = np.asarray(draw, dtype=float).reshape(shape)
        return state


def _data_value_check(model: Model, name: str, values: np.ndarray, mask: np.ndarray, rows) -> None:
    dom = model.graph.node(name).domain
    ok = ~mask
    v = values
    bad = None
    if dom.is_discrete:
        bad = ok & ((v != np.round(v)) | (v < 0) | (v >= dom.size))
        what = f"a value in 0..{dom.size - 1}"
    elif dom.kind == "positive-real":
        bad = ok & ~(v > 0)
        what = "a positive value"
    elif dom.kind == "unit-interval":
        bad = ok & ~((v > 0) & (v < 1))
        what = "a value in (0, 1)"
    if bad is not None and bad.any():
        if np.ndim(bad) == 0:
            # non-plate nodes read row 1
            raise DataError(f"row 1: column for '{name}' holds {float(v):g}, expected {what}")
        idx = np.argwhere(bad)[0]
        r = int(rows[idx[0]])
        raise DataError(
            f"row {r + 1}: column for '{name}' holds {v[tuple(idx)]:g}, expected {what}"
        )


def bind_data(model: Model, table: Optional[DataTable] = None) -> BoundModel:
    """Attach case data: data-plate sizes come from the row count, observed
    nodes read their columns, ``?`` cells become unknown."""
    table = table if table is not None else DataTable((), np.zeros((0, 0)), np.zeros((0, 0), bool))
    n = table.n_rows
    sizes = {p.name: p.size for p in model.graph.plates}
    for p in model.data_plates:
        sizes[p] = n
    observed: dict = {}
    missing: dict = {}
    rows = np.arange(n)
    for name, col in model.columns.items():
        node = model.graph.node(name)
        vshape = tuple(model.shapes[name])
        dplates = [p for p in node.plates if p in model.data_plates]
        if len(dplates) > 1 or (node.plates and (not dplates or node.plates != tuple(dplates))):
            raise ModelError(
                "type", f"observed node '{name}' must sit directly in one data plate or outside all plates"
            )
        names = [col] if not vshape else [f"{col}[{j}]" for j in range(int(np.prod(vshape)))]
        cols, masks = [], []
        for c in names:
            if not table.has(c):
                raise DataError(f"data has no column '{c}' for node '{name}'")
            v, m = table.column(c)
            cols.append(v)
            masks.append(m)
        vals = np.stack(cols, axis=-1) if vshape else cols[0]
        mask = np.any(np.stack(masks, axis=-1), axis=-1) if vshape else masks[0]
        if not dplates:
            if n == 0:
                raise DataError(f"node '{name}' is observed but the data has no rows")
            vals, mask = vals[0], mask[0]
            if mask:
                raise DataError(f"node '{name}' outside all plates cannot be missing")
        vals = np.array(vals, dtype=float).reshape((n,) + vshape if dplates else vshape)
        mask = np.array(mask, dtype=bool)
        _data_value_check(model, name, vals if not vshape else vals[..., 0], mask, rows)
        if np.any(mask):
            vals[mask] = np.nan
        observed[name] = vals
        missing[name] = mask
    return BoundModel(model, sizes, observed, missing, table)


def simulate_data(
    model: Model, n: int, rng: np.random.Generator, values: Optional[dict] = None
) -> tuple[DataTable, dict]:
    """Draw ``n`` synthetic cases by ancestral sampling.

    ``values`` fixes chosen nodes (for example known parameters); everything
    else is drawn from its conditional.  Returns the table of observed
    columns and the full state that generated it.
    """
    from plategm.semantics import _enumerate_component, node_context

    sizes = {p.name: p.size for p in model.graph.plates}
    for p in model.data_plates:
        sizes[p] = int(n)
    bm = BoundModel(model, sizes, {}, {})
    values = values or {}
    state: dict = {}
    comp_of = bm.component_of
    done: set = set()
    for name in bm.topo_order:
        node = bm.node(name)
        if node.deterministic or name in done:
            continue
        comp = comp_of[name]
        done |= set(comp)
        if name in values:
            for m in comp:
                state[m] = np.broadcast_to(np.asarray(values[m], dtype=float), bm.full_shape(m)).copy()
            continue
        shape = bm.plate_shape(name)
        if len(comp) == 1:
            from plategm.semantics import node_args

            nb = len(shape)
            args = [np.broadcast_to(a, shape + a.shape[nb:]) for a in node_args(bm, state, name)]
            draw = bm.family(name).sample(rng, args, nb)
            state[name] = np.broadcast_to(draw, bm.full_shape(name)).astype(float).copy()
            continue
        ctx = node_context(bm, state, comp[0])
        configs, logpot, _ = _enumerate_component(bm, state, comp, ctx, False)
        logpot = np.broadcast_to(logpot, shape + logpot.shape[-1:])
        p = np.exp(logpot - logpot.max(axis=-1, keepdims=True))
        p /= p.sum(axis=-1, keepdims=True)
        u = rng.random(shape + (1,))
        pick = np.minimum((np.cumsum(p, axis=-1) < u).sum(axis=-1), p.shape[-1] - 1)
        for j, m in enumerate(comp):
            state[m] = configs[pick, j].astype(float)
    cols: dict = {}
    for name, col in model.columns.items():
        v = state[name]
        vshape = tuple(model.shapes[name])
        in_plate = bool(bm.node(name).plates)
        if not in_plate:
            v = np.broadcast_to(v, (max(n, 1),) + vshape)
        if vshape:
            flat = v.reshape(v.shape[0], -1)
            for j in range(flat.shape[1]):
                cols[f"{col}[{j}]"] = flat[:, j]
        else:
            cols[col] = v
    return DataTable.from_columns(cols), state
