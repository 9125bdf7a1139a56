"""Discrete factors over named variables and exact joint enumeration.

Used by the structural operations on explicit-table graphs and as the
enumeration oracle in tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = ["Factor", "joint_factor", "conditional"]


@dataclass(frozen=True)
class Factor:
    """Non-negative table with one named axis per variable."""

    vars: tuple
    table: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.table, dtype=float)
        if t.ndim != len(self.vars):
            raise ValueError(f"factor over {self.vars} has {t.ndim} axes")
        object.__setattr__(self, "table", t)

    @property
    def cards(self) -> dict:
        return dict(zip(self.vars, self.table.shape))

    def align(self, order: Sequence[str], cards: dict) -> np.ndarray:
        """Table broadcast onto axes ``order`` (missing variables get size 1)."""
        perm = [self.vars.index(v) for v in order if v in self.vars]
        t = np.transpose(self.table, perm) if perm else self.table
        shape = [cards[v] if v in self.vars else 1 for v in order]
        return t.reshape(shape)

    def __mul__(self, other: "Factor") -> "Factor":
        order = list(self.vars) + [v for v in other.vars if v not in self.vars]
        cards = {**self.cards, **other.cards}
        return Factor(tuple(order), self.align(order, cards) * other.align(order, cards))

    def marginalize(self, names: Iterable[str]) -> "Factor":
        names = set(names)
        axes = tuple(i for i, v in enumerate(self.vars) if v in names)
        keep = tuple(v for v in self.vars if v not in names)
        return Factor(keep, self.table.sum(axis=axes) if axes else self.table)

    def reorder(self, order: Sequence[str]) -> "Factor":
        return Factor(tuple(order), self.align(order, self.cards))

    def normalize(self) -> "Factor":
        return Factor(self.vars, self.table / self.table.sum())


def _node_factor(g, name: str) -> Factor:
    node = g.node(name)
    if node.table is None:
        raise ValueError(f"node '{name}' has no explicit table")
    return Factor(tuple(node.table_parents) + (name,), node.table)


def joint_factor(g) -> Factor:
    """Exact joint distribution of an explicit-table, plate-free chain graph.

    Each chain component contributes the product of its node tables and link
    potentials, normalised over the component for every parent configuration.
    """
    from plategm.graph.ops import chain_components

    total = Factor((), np.array(1.0))
    for comp in chain_components(g):
        comp = sorted(comp)
        f = Factor((), np.array(1.0))
        for name in comp:
            f = f * _node_factor(g, name)
        for arc in g.arcs:
            if not arc.directed and arc.src in comp and arc.dst in comp:
                f = f * Factor((arc.src, arc.dst), arc.potential)
        if len(comp) > 1:
            z = f.marginalize(comp)
            order = list(f.vars)
            f = Factor(f.vars, f.table / z.align(order, f.cards))
        total = total * f
    return total.reorder(sorted(total.vars))


def conditional(joint: Factor, target: Sequence[str], given: dict) -> Factor:
    """``p(target | given)`` from a joint factor by enumeration."""
    t = joint
    idx = []
    for v in t.vars:
        idx.append(given[v] if v in given else slice(None))
    keep = tuple(v for v in t.vars if v not in given)
    sub = Factor(keep, t.table[tuple(idx)])
    sub = sub.marginalize([v for v in keep if v not in target])
    return sub.normalize().reorder(list(target))
