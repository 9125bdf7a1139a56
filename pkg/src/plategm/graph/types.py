"""Immutable chain graphs with plates."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Optional

import numpy as np

from plategm.expfam.families import Domain
from plategm.expr import Expr, Ref, refs

__all__ = [
    "GraphError",
    "VariableNode",
    "Arc",
    "Plate",
    "ChainGraphWithPlates",
    "ChainComponentPartition",
]


class GraphError(ValueError):
    """Structural error in a graph operation."""

    def __init__(self, message: str, code: str = "graph", nodes: tuple = ()):
        super().__init__(message)
        self.code = code
        self.nodes = tuple(nodes)


@dataclass(frozen=True)
class VariableNode:
    """A stochastic or deterministic variable.

    ``args`` are the family arguments of a stochastic node and ``expr`` the
    defining expression of a deterministic one.  ``table`` optionally holds an
    explicit conditional table (or clique potential for nodes in an undirected
    component) with axes ``table_parents + (name,)``.
    """

    name: str
    kind: str = "stochastic"
    observed: bool = False
    domain: Domain = Domain("discrete", 2)
    family: Optional[str] = None
    args: tuple = ()
    expr: Optional[Expr] = None
    plates: tuple = ()
    table: Optional[np.ndarray] = field(default=None, compare=False, repr=False)
    table_parents: tuple = ()

    @property
    def id(self) -> str:
        return self.name

    @property
    def deterministic(self) -> bool:
        return self.kind == "deterministic"

    def with_(self, **changes) -> "VariableNode":
        return replace(self, **changes)

    def referenced(self) -> set[str]:
        """Names referenced by the arguments or expression."""
        exprs = [self.expr] if self.expr is not None else list(self.args)
        out: set[str] = set()
        for e in exprs:
            out.update(r.name for r in refs(e))
        return out


@dataclass(frozen=True)
class Arc:
    """Directed ``src -> dst`` or undirected ``src -- dst`` arc.

    Undirected arcs may carry a pairwise log-potential table (expressions,
    row-major over the two endpoint values) or a numeric potential.
    """

    src: str
    dst: str
    orientation: str = "directed"
    optional: bool = False
    log_table: tuple = ()
    potential: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    @property
    def directed(self) -> bool:
        return self.orientation == "directed"

    @property
    def endpoints(self) -> tuple[str, str]:
        return (self.src, self.dst)

    def key(self) -> frozenset:
        return frozenset((self.src, self.dst))


@dataclass(frozen=True)
class Plate:
    """A plate; ``size`` is None until bound to data (then ``size_ref`` names it)."""

    name: str
    size: Optional[int] = None
    size_ref: Optional[str] = None

    @property
    def id(self) -> str:
        return self.name

    @property
    def cardinality(self) -> Optional[int]:
        return self.size


@dataclass(frozen=True)
class ChainComponentPartition:
    """Chain components in an order consistent with the directed arcs."""

    components: tuple

    def __iter__(self):
        return iter(self.components)

    def __len__(self) -> int:
        return len(self.components)

    def of(self, name: str) -> frozenset:
        for c in self.components:
            if name in c:
                return c
        raise KeyError(name)


@dataclass(frozen=True)
class ChainGraphWithPlates:
    nodes: tuple = ()
    arcs: tuple = ()
    plates: tuple = ()
    # declaration order of optional arcs (src, dst) in the model family
    optional_order: tuple = ()

    # -- lookups -------------------------------------------------------------
    @cached_property
    def _by_name(self) -> dict:
        return {n.name: n for n in self.nodes}

    @cached_property
    def _plates_by_name(self) -> dict:
        return {p.name: p for p in self.plates}

    @cached_property
    def _adj(self):
        parents: dict[str, list] = {n.name: [] for n in self.nodes}
        children: dict[str, list] = {n.name: [] for n in self.nodes}
        nbrs: dict[str, list] = {n.name: [] for n in self.nodes}
        for a in self.arcs:
            if a.directed:
                parents.setdefault(a.dst, []).append(a.src)
                children.setdefault(a.src, []).append(a.dst)
            else:
                nbrs.setdefault(a.src, []).append(a.dst)
                nbrs.setdefault(a.dst, []).append(a.src)
        return parents, children, nbrs

    def node(self, name: str) -> VariableNode:
        try:
            return self._by_name[name]
        except KeyError:
            raise GraphError(f"unknown node '{name}'", "unknown-node", (name,)) from None

    def has_node(self, name: str) -> bool:
        return name in self._by_name

    def plate(self, name: str) -> Plate:
        return self._plates_by_name[name]

    @property
    def names(self) -> list[str]:
        return [n.name for n in self.nodes]

    def parents(self, name: str) -> list[str]:
        return list(self._adj[0].get(name, []))

    def children(self, name: str) -> list[str]:
        return list(self._adj[1].get(name, []))

    def neighbors(self, name: str) -> list[str]:
        return list(self._adj[2].get(name, []))

    def arc(self, a: str, b: str) -> Optional[Arc]:
        for arc in self.arcs:
            if arc.key() == frozenset((a, b)):
                return arc
        return None

    def members(self, plate: str) -> frozenset:
        return frozenset(n.name for n in self.nodes if plate in n.plates)

    # -- variable sets ------------------------------------------------------
    @property
    def known(self) -> frozenset:
        return frozenset(n.name for n in self.nodes if n.observed)

    @property
    def unknown(self) -> frozenset:
        return frozenset(n.name for n in self.nodes if not n.observed and not n.deterministic)

    def indval(self, name: str) -> list[tuple]:
        """Index tuples of a node's plate copies (declaration order)."""
        sizes = [self.plate(p).size for p in self.node(name).plates]
        if any(s is None for s in sizes):
            raise GraphError(f"plate size of '{name}' not bound", "unbound-plate", (name,))
        return [tuple(ix) for ix in np.ndindex(*sizes)] if sizes else [()]

    # -- deterministic closures ---------------------------------------------
    def ndparents(self, name: str) -> set[str]:
        """Non-deterministic parents, looking through deterministic parents."""
        out: set[str] = set()
        stack = list(self.parents(name))
        seen: set[str] = set()
        while stack:
            p = stack.pop()
            if p in seen:
                continue
            seen.add(p)
            if self.node(p).deterministic:
                stack.extend(self.parents(p))
            else:
                out.add(p)
        return out

    def ndchildren(self, name: str) -> set[str]:
        """Non-deterministic children, looking through deterministic children."""
        out: set[str] = set()
        stack = list(self.children(name))
        seen: set[str] = set()
        while stack:
            c = stack.pop()
            if c in seen:
                continue
            seen.add(c)
            if self.node(c).deterministic:
                stack.extend(self.children(c))
            else:
                out.add(c)
        return out

    # -- construction helpers --------------------------------------------------
    def with_nodes(self, nodes: Iterable[VariableNode]) -> "ChainGraphWithPlates":
        return replace(self, nodes=tuple(nodes))

    def with_arcs(self, arcs: Iterable[Arc]) -> "ChainGraphWithPlates":
        return replace(self, arcs=tuple(arcs))

    def replace_node(self, node: VariableNode) -> "ChainGraphWithPlates":
        return self.with_nodes(node if n.name == node.name else n for n in self.nodes)

    def observe(self, names: Iterable[str], observed: bool = True) -> "ChainGraphWithPlates":
        names = set(names)
        return self.with_nodes(
            n.with_(observed=observed) if n.name in names else n for n in self.nodes
        )


def directed_arcs_from_refs(nodes: Iterable[VariableNode]) -> list[Arc]:
    """Directed arcs implied by references inside arguments and expressions."""
    nodes = list(nodes)
    names = {n.name for n in nodes}
    arcs = []
    for n in nodes:
        for p in sorted(n.referenced()):
            if p in names and p != n.name:
                arcs.append(Arc(p, n.name))
    return arcs


def ref_names(expr: Expr) -> set[str]:
    return {r.name for r in refs(expr) if isinstance(r, Ref)}
