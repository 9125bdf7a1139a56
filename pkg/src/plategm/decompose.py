"""Independent subproblems, exact evidence, Bayes factors and schema labels.

The unknown variables of a model are partitioned into the finest sets whose
Markov blankets stay inside the set (plates ignored).  With complete data and
conjugate parameter groups, the evidence is a product over these sets; each
factor is a sum of closed-form conjugate evidences over the parameter copies
of its groups.

For families of networks defined by optional arcs, :class:`EvidenceScorer`
caches factor scores by the optional arcs that can touch them, so toggling
one arc recomputes one factor.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Optional

import networkx as nx
import numpy as np

from plategm.conjugacy import ConjugateGroup, find_groups, tainted_nodes
from plategm.expr import refs
from plategm.graph.ops import eliminate_deterministic, markov_blanket, prune_given
from plategm.graph.types import ChainGraphWithPlates, GraphError
from plategm.semantics import log_joint

__all__ = [
    "Subproblem",
    "DecompositionResult",
    "SchemaClassification",
    "SchemaError",
    "EvidenceScorer",
    "ScoredModel",
    "effective_graph",
    "finest_decomposition",
    "factored_log_evidence",
    "whole_model_log_evidence",
    "incremental_update",
    "log_bayes_factor",
    "classify_schema",
]


class SchemaError(ValueError):
    """The requested exact computation does not apply to this model."""


@dataclass(frozen=True)
class Subproblem:
    """One factor: its unknown nodes and the nodes of its induced subgraph."""

    unknowns: frozenset
    nodes: frozenset

    @property
    def label(self) -> str:
        return ",".join(sorted(self.unknowns))


@dataclass(frozen=True)
class DecompositionResult:
    subproblems: tuple
    known_only: frozenset
    reinserted: dict = field(default_factory=dict)
    flags: tuple = ()

    def factor_of(self, name: str) -> int:
        for i, s in enumerate(self.subproblems):
            if name in s.unknowns:
                return i
        raise KeyError(name)

    @property
    def labels(self) -> list[str]:
        return [s.label for s in self.subproblems]


@dataclass(frozen=True)
class SchemaClassification:
    """``label`` for the whole model, ``groups`` per parameter, plus a trace
    of the conditions that were checked."""

    label: str
    groups: dict
    trace: tuple
    fixed: tuple = ()


def effective_graph(bm) -> ChainGraphWithPlates:
    """The model graph with ``observed`` set only on fully known nodes."""
    unknown = set(bm.unknowns)
    nodes = tuple(
        n.with_(observed=(not n.deterministic and n.name not in unknown and n.observed))
        for n in bm.graph.nodes
    )
    return replace(bm.graph, nodes=nodes)


def finest_decomposition(g) -> DecompositionResult:
    """Finest partition of the unknowns closed under Markov blankets.

    ``g`` is a graph or a bound model.  Unobserved deterministic nodes are
    eliminated first and reported against the factor holding their unknown
    stochastic ancestors.
    """
    if not isinstance(g, ChainGraphWithPlates):
        g = effective_graph(g)
    flags = []
    try:
        reduced = eliminate_deterministic(g)
    except GraphError as exc:
        if exc.code not in ("ambiguous-reinsertion", "unsupported"):
            raise
        flags.append("ambiguous-reinsertion")
        reduced = g
    reduced = prune_given(reduced)
    unknown = [n.name for n in reduced.nodes if not n.observed and not n.deterministic]
    uf = nx.utils.UnionFind(unknown)
    blankets = {}
    for u in unknown:
        blankets[u] = markov_blanket(reduced, u)
        for v in blankets[u]:
            if v in uf.parents:
                uf.union(u, v)
    order = {n: i for i, n in enumerate(g.names)}
    sets = sorted((frozenset(s) for s in uf.to_sets()), key=lambda s: min(order[n] for n in s))
    subs = []
    for s in sets:
        nodes = set(s)
        for u in s:
            nodes |= blankets[u]
        subs.append(Subproblem(s, frozenset(nodes)))
    covered = set().union(*[s.nodes for s in subs]) if subs else set()
    known_only = frozenset(
        n.name for n in reduced.nodes if n.name not in covered and not n.deterministic
    )
    reinserted = {}
    det = [n.name for n in g.nodes if n.deterministic and not reduced.has_node(n.name)]
    for d in det:
        anc = _stochastic_ancestors(g, d) & set(unknown)
        hits = {i for i, s in enumerate(subs) if s.unknowns & anc}
        if len(hits) > 1:
            flags.append(f"ambiguous-reinsertion:{d}")
        reinserted[d] = min(hits) if hits else None
    return DecompositionResult(tuple(subs), known_only, reinserted, tuple(flags))


def _stochastic_ancestors(g: ChainGraphWithPlates, name: str) -> set:
    out, stack = set(), list(g.parents(name))
    while stack:
        p = stack.pop()
        if p in out:
            continue
        out.add(p)
        if g.node(p).deterministic:
            stack.extend(g.parents(p))
    return {p for p in out if not g.node(p).deterministic}


# ---------------------------------------------------------------------------
# evidence


def _check_exact(bm, groups: list[ConjugateGroup], reasons: dict) -> None:
    if reasons:
        name, why = sorted(reasons.items())[0]
        raise SchemaError(
            f"parameter '{name}' is not exact-exponential ({why}); use the sampler or EM"
        )
    if bm.case_unknowns:
        raise SchemaError(
            f"unknown case values in {list(bm.case_unknowns)}; use the sampler or EM"
        )
    other = set(bm.unknowns) - set(bm.parameters)
    if other:
        raise SchemaError(f"unknown non-parameter nodes {sorted(other)}; use the sampler or EM")


def _group_evidence(bm, group: ConjugateGroup, state: dict) -> float:
    priors = group.priors(bm)
    return float(sum(p.log_evidence(s) for p, s in zip(priors, group.stats(bm, state))))


def _known_components(bm, tainted: set) -> list:
    out = []
    for comp in bm.components:
        names = set()
        for n in comp:
            names |= {r.name for a in bm.node(n).args for r in refs(a)}
        for lk in bm.links_of.get(comp, []):
            names |= {r.name for e in lk.table for r in refs(e)}
        if not (names & tainted) and not (set(comp) & tainted):
            out.append(comp)
    return out


def factored_log_evidence(bm, dec: Optional[DecompositionResult] = None) -> tuple[dict, float]:
    """Per-factor log-evidence (keyed by factor label, plus ``"known"`` for the
    parameter-free part) and the total."""
    dec = dec or finest_decomposition(bm)
    groups, reasons = find_groups(bm)
    _check_exact(bm, groups, reasons)
    state = bm.observed_state()
    per: dict = {}
    for sub in dec.subproblems:
        gs = [g for g in groups if set(g.members) & sub.unknowns]
        covered = set().union(*[set(g.members) for g in gs]) if gs else set()
        if covered != set(sub.unknowns):
            raise SchemaError(f"factor {{{sub.label}}} is not covered by conjugate groups")
        per[sub.label] = sum(_group_evidence(bm, g, state) for g in gs)
    tainted = tainted_nodes(bm, set(bm.parameters))
    per["known"] = log_joint(bm, state, _known_components(bm, tainted))
    return per, float(sum(per.values()))


def whole_model_log_evidence(bm, point: str = "mean") -> float:
    """Evidence of the whole model by the identity
    ``log p(D) = log p(D, theta) - log p(theta | D)`` at one parameter value.

    Unlike :func:`factored_log_evidence` this never splits the log joint by
    factor; it serves as an independent check of the factorisation.
    """
    groups, reasons = find_groups(bm)
    _check_exact(bm, groups, reasons)
    state = bm.observed_state()
    log_post = 0.0
    for g in groups:
        posts = [p.posterior(s) for p, s in zip(g.priors(bm), g.stats(bm, state))]
        vals = [getattr(p, point)() for p in posts]
        vals = [{k: np.asarray(v) for k, v in d.items()} for d in vals]
        g.assign(bm, state, vals)
        for p, v in zip(posts, g.values(bm, state)):
            log_post += p.log_density(v)
    return log_joint(bm, state) - log_post


def log_bayes_factor(bm2, bm1) -> float:
    """``log p(D | M2) - log p(D | M1)`` for two bound models over the same variables."""
    if set(bm2.graph.names) != set(bm1.graph.names):
        raise ValueError("models have different variable sets")
    return factored_log_evidence(bm2)[1] - factored_log_evidence(bm1)[1]


# ---------------------------------------------------------------------------
# families of networks


@dataclass(frozen=True)
class ScoredModel:
    bits: int
    factors: dict

    @property
    def total(self) -> float:
        return float(sum(self.factors.values()))


class EvidenceScorer:
    """Cached factor evidences for the members of an optional-arc family.

    A factor's cache key is its label plus the optional arcs pointing into
    the nodes the factor scores, so a toggle of arc ``u -> v`` invalidates
    only the factor that owns ``v``.  ``recomputed`` lists every factor
    evaluation performed (the cache misses).
    """

    def __init__(self, bm):
        self.bm = bm
        self.arcs = tuple(bm.graph.optional_order)
        self._cache: dict = {}
        self._models: dict = {}
        self.recomputed: list = []
        full = bm.instantiate(bm.model.full_bits)
        self.dec = finest_decomposition(full)
        groups, reasons = find_groups(full)
        _check_exact(full, groups, reasons)
        self._scored_nodes = {}
        tainted = tainted_nodes(full, set(full.parameters))
        for sub in self.dec.subproblems:
            gs = [g for g in groups if set(g.members) & sub.unknowns]
            self._scored_nodes[sub.label] = {s.node for g in gs for s in g.sites}
        known = _known_components(full, tainted)
        self._scored_nodes["known"] = {n for c in known for n in c}
        self._masks = {}
        for label, nodes in self._scored_nodes.items():
            m = 0
            for i, (_, v) in enumerate(self.arcs):
                if v in nodes:
                    m |= 1 << i
            self._masks[label] = m

    @property
    def labels(self) -> list[str]:
        return list(self._masks)

    def owner(self, arc_index: int) -> str:
        v = self.arcs[arc_index][1]
        for label, nodes in self._scored_nodes.items():
            if v in nodes:
                return label
        return "known"

    def model(self, bits: int):
        bm = self._models.get(bits)
        if bm is None:
            bm = self._models[bits] = self.bm.instantiate(bits)
        return bm

    def acyclic(self, bits: int) -> bool:
        g = self.model(bits).graph
        dg = nx.DiGraph()
        dg.add_nodes_from(g.names)
        dg.add_edges_from(a.endpoints for a in g.arcs if a.directed)
        return nx.is_directed_acyclic_graph(dg)

    def factor(self, label: str, bits: int) -> float:
        key = (label, bits & self._masks[label])
        v = self._cache.get(key)
        if v is None:
            v = self._cache[key] = self._compute(label, bits)
            self.recomputed.append(label)
        return v

    def _compute(self, label: str, bits: int) -> float:
        bm = self.model(bits)
        groups, reasons = find_groups(bm)
        _check_exact(bm, groups, reasons)
        state = bm.observed_state()
        if label == "known":
            tainted = tainted_nodes(bm, set(bm.parameters))
            return log_joint(bm, state, _known_components(bm, tainted))
        sub = next(s for s in self.dec.subproblems if s.label == label)
        gs = [g for g in groups if set(g.members) & sub.unknowns]
        return sum(_group_evidence(bm, g, state) for g in gs)

    def score(self, bits: int) -> ScoredModel:
        if not self.acyclic(bits):
            raise GraphError("optional arcs create a directed cycle", "cycle")
        return ScoredModel(bits, {lab: self.factor(lab, bits) for lab in self._masks})

    def toggle(self, scored: ScoredModel, arc_index: int) -> tuple[ScoredModel, str]:
        bits = scored.bits ^ (1 << arc_index)
        if not self.acyclic(bits):
            raise GraphError("optional arcs create a directed cycle", "cycle")
        label = self.owner(arc_index)
        factors = dict(scored.factors)
        factors[label] = self.factor(label, bits)
        return ScoredModel(bits, factors), label


def incremental_update(scorer: EvidenceScorer, scored: ScoredModel, edit: tuple) -> tuple[ScoredModel, str]:
    """Add or remove the optional arc ``edit = (u, v)``; return the new scores
    and the label of the single factor that changed."""
    u, v = edit
    try:
        i = scorer.arcs.index((u, v))
    except ValueError:
        raise ValueError(f"{u} -> {v} is not an optional arc of this family") from None
    node_u = scorer.bm.node(u)
    if node_u.deterministic or u in scorer.bm.unknowns:
        raise ValueError(f"arc source '{u}' must be observed and non-deterministic")
    return scorer.toggle(scored, i)


# ---------------------------------------------------------------------------
# schema


def _arcs_into_plates(bm) -> Optional[str]:
    for a in bm.graph.arcs:
        if not a.directed:
            continue
        src, dst = bm.node(a.src), bm.node(a.dst)
        out = [p for p in src.plates if p in bm.model.data_plates and p not in dst.plates]
        if out:
            return f"arc {a.src} -> {a.dst} leaves the data plate"
    return None


def classify_schema(bm) -> SchemaClassification:
    """Label the model exact-exponential, mixture, partial-exponential or
    unsupported, with a readable trace of the checks."""
    trace = []
    bad = _arcs_into_plates(bm)
    if bad:
        trace.append(f"arcs crossing the data plate point into it: no ({bad})")
        return SchemaClassification("unsupported", {p: "unsupported" for p in bm.parameters}, tuple(trace))
    trace.append("arcs crossing the data plate point into it: yes")
    groups, reasons = find_groups(bm)
    latent = bool(set(bm.unknowns) - set(bm.parameters))
    trace.append(
        "in-plate nodes observed: " + ("yes" if not latent else f"no ({', '.join(bm.case_unknowns)})")
    )
    if not reasons:
        trace.append("conjugate family pattern for every parameter: yes")
        label = "mixture" if latent else "exact-exponential"
        return SchemaClassification(label, {m: label for g in groups for m in g.members}, tuple(trace))
    for name, why in sorted(reasons.items()):
        trace.append(f"conjugate family pattern for '{name}': no ({why})")
    # smallest set of failing parameters whose fixing leaves the rest conjugate
    failing = sorted(reasons)
    found = None
    for size in range(1, min(len(failing), 10) + 1):
        for fixed in itertools.combinations(failing, size):
            groups2, reasons2 = find_groups(bm, frozenset(fixed))
            if groups2 and not reasons2:
                found = (fixed, groups2)
                break
        if found:
            break
    if found:
        fixed, groups2 = found
        trace.append(
            f"conjugate given fixed {list(fixed)}: yes ({', '.join(g.name for g in groups2)})"
        )
        inner = "mixture" if latent else "partial-exponential"
        labels = {m: inner for g in groups2 for m in g.members}
        labels.update({p: "fixed" for p in fixed})
        return SchemaClassification("partial-exponential", labels, tuple(trace), tuple(fixed))
    trace.append("conjugate given fixed parameters: no")
    return SchemaClassification("unsupported", {p: "unsupported" for p in bm.parameters}, tuple(trace))
