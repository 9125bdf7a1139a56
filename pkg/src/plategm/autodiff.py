"""Derivatives of log-joint and log-marginal probabilities.

The log joint is a sum of per-component log densities.  Its derivative with
respect to an unknown collects the node's own prior term, the terms of its
non-deterministic children, and terms reached through deterministic islands,
where local derivatives of the child densities are chained with the
island's Jacobian.  Two evaluation strategies are offered: ``inline`` runs
reverse mode straight through deterministic expressions, ``islands`` first
records local partials at deterministic nodes and then pushes them back node
by node in reverse topological order.  They agree to rounding.

Log-marginal gradients average log-joint gradients over the posterior of the
discrete unknowns, enumerated exactly.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np
from scipy.special import logsumexp

from plategm.expr import forward, jvp, unbroadcast
from plategm.graph.ops import deterministic_islands
from plategm.semantics import (
    GradSink,
    component_logp,
    grad_log_joint,
    log_joint,
    node_context,
)

__all__ = [
    "DeterministicIsland",
    "GradientReport",
    "EnumerationError",
    "islands",
    "island_jacobian",
    "log_joint_grad",
    "log_marginal",
    "log_marginal_grad",
    "responsibilities",
    "exponential_form_grad",
    "finite_diff_check",
    "MAX_CONFIGS",
]

MAX_CONFIGS = 100_000


class EnumerationError(ValueError):
    """The latent support is too large or not discrete."""


@dataclass(frozen=True)
class DeterministicIsland:
    members: frozenset
    inputs: tuple
    outputs: tuple


@dataclass
class GradientReport:
    """Per-target gradient arrays with the method used."""

    grads: dict
    method: str
    point: dict = field(default_factory=dict, repr=False)

    def max_abs(self) -> float:
        return max((float(np.max(np.abs(g))) for g in self.grads.values() if np.size(g)), default=0.0)


# ---------------------------------------------------------------------------
# islands


def islands(bm) -> list[DeterministicIsland]:
    """Connected deterministic islands with their stochastic inputs and the
    members that feed stochastic children."""
    g = bm.graph
    out = []
    for isl in deterministic_islands(g):
        inputs, outputs = set(), []
        for d in isl:
            inputs |= {p for p in g.parents(d) if not g.node(p).deterministic}
        for d in sorted(isl, key=bm.topo_order.index):
            if any(not g.node(c).deterministic for c in g.children(d)) or not g.children(d):
                outputs.append(d)
        order = [n for n in bm.topo_order if n in inputs]
        out.append(DeterministicIsland(frozenset(isl), tuple(order), tuple(outputs)))
    return out


def island_jacobian(bm, state: dict, island: DeterministicIsland, mode: str = "backward") -> dict:
    """Jacobian ``d output / d input`` for every boundary pair.

    Keys are ``(output, input)``; values have shape
    ``full_shape(output) + full_shape(input)``.
    """
    for name in island.inputs:
        if name not in state or np.any(np.isnan(state[name])):
            raise ValueError(f"island input '{name}' is unassigned")
    out: dict = {}
    if mode == "forward":
        for inp in island.inputs:
            shp = bm.full_shape(inp)
            size = int(np.prod(shp))
            # one tangent direction per input element
            tangents = {inp: np.eye(size).reshape(shp + (size,))}
            for o in island.outputs:
                ctx = node_context(bm, state, o, tangents=tangents)
                val, tan = jvp(bm.node(o).expr, ctx)
                oshape = bm.full_shape(o)
                if tan is None:
                    tan = np.zeros(oshape + (size,))
                tan = np.broadcast_to(tan, oshape + (size,))
                out[(o, inp)] = tan.reshape(oshape + shp)
        return out
    if mode != "backward":
        raise ValueError("mode must be 'forward' or 'backward'")
    for o in island.outputs:
        oshape = bm.full_shape(o)
        size = int(np.prod(oshape))
        rows = {i: np.zeros((size,) + bm.full_shape(i)) for i in island.inputs}
        nb = len(bm.node(o).plates)
        for k in range(size):
            sink = GradSink(bm, set(island.inputs))
            ctx = node_context(bm, state, o, sink=sink, need_grad=True)
            val, back = forward(bm.node(o).expr, ctx)
            cot = np.zeros(size)
            cot[k] = 1.0
            back(unbroadcast(cot.reshape(oshape), val.shape, nb))
            for i in island.inputs:
                if i in sink.grads:
                    rows[i][k] = sink.grads[i]
        for i in island.inputs:
            out[(o, i)] = rows[i].reshape(oshape + bm.full_shape(i))
    return out


# ---------------------------------------------------------------------------
# log-joint gradients


def _push_islands(bm, state: dict, grads: dict) -> dict:
    """Propagate local partials recorded at deterministic nodes to their
    parents, one node at a time in reverse topological order."""
    det = frozenset(bm.deterministic)
    sink = GradSink(bm)
    sink.grads = {k: np.array(v) for k, v in grads.items()}
    for d in reversed(bm.topo_order):
        if d not in det or d not in sink.grads:
            continue
        g = sink.grads.pop(d)
        if not np.any(g):
            continue
        ctx = node_context(bm, state, d, sink=sink, leaf_det=det, need_grad=True)
        val, back = forward(bm.node(d).expr, ctx)
        nb = len(bm.node(d).plates)
        back(unbroadcast(g, val.shape, nb))
    return sink.grads


def log_joint_grad(
    bm,
    state: dict,
    targets: Optional[Iterable[str]] = None,
    method: str = "inline",
    weights: Optional[Callable] = None,
    components=None,
) -> dict:
    """Gradient of ``log p(X)`` at a complete ``state``.

    Returns a dict of full-shape arrays for each target (default: all
    unknown stochastic nodes with continuous values).
    """
    if targets is None:
        targets = [n for n in bm.unknowns if not bm.node(n).domain.is_discrete]
    targets = list(targets)
    for t in targets:
        node = bm.node(t)
        if node.deterministic:
            raise ValueError(f"'{t}' is deterministic")
        if node.observed and not bm.has_missing(t):
            raise ValueError(f"'{t}' is observed")
    if method == "inline":
        g = grad_log_joint(bm, state, set(targets), weights, components)
    elif method == "islands":
        det = frozenset(bm.deterministic)
        g = grad_log_joint(bm, state, None, weights, components, leaf_det=det)
        g = _push_islands(bm, state, g)
    else:
        raise ValueError("method must be 'inline' or 'islands'")
    return {t: g.get(t, np.zeros(bm.full_shape(t))) for t in targets}


# ---------------------------------------------------------------------------
# marginals over discrete unknowns


@dataclass
class _Enumeration:
    """Posterior over discrete unknowns, factored as global x per-case."""

    global_nodes: tuple
    case_nodes: tuple
    global_configs: np.ndarray
    case_configs: np.ndarray
    states: list  # per global config: list of per-case-config states
    global_logw: np.ndarray  # (G,)
    case_logp: list  # per global config: (C, N) per-case log joint
    log_marginal: float


def _data_axis_plate(bm, names) -> Optional[str]:
    plates = {bm.node(n).plates[0] for n in names if bm.node(n).plates}
    if len(plates) > 1:
        raise EnumerationError("discrete case unknowns span several data plates")
    return next(iter(plates), None)


def _set(bm, state: dict, name: str, value: float) -> None:
    if bm.node(name).observed:
        m = bm.missing[name]
        cur = np.array(state[name])
        cur[m] = value
        state[name] = cur
    else:
        state[name] = np.full(bm.full_shape(name), float(value))


def _case_comps(bm, plate: Optional[str]) -> tuple:
    if plate is None:
        return (), tuple(bm.components)
    inner = tuple(c for c in bm.components if plate in bm.node(c[0]).plates)
    outer = tuple(c for c in bm.components if plate not in bm.node(c[0]).plates)
    return inner, outer


def _case_logp(bm, state: dict, comps, plate: str) -> np.ndarray:
    n = bm.plate_size(plate)
    out = np.zeros(n)
    for c in comps:
        lp = component_logp(bm, state, c)
        ax = bm.node(c[0]).plates.index(plate)
        lp = np.moveaxis(lp, ax, 0).reshape(n, -1).sum(axis=1)
        out += lp
    return out


def _enumerate(bm, state: dict) -> _Enumeration:
    disc = list(bm.discrete_unknowns)
    cont_missing = [
        n for n in bm.case_unknowns if not bm.node(n).domain.is_discrete
    ]
    if cont_missing:
        raise EnumerationError(
            f"continuous unknown case values {cont_missing} need a sampler for marginalisation"
        )
    case_nodes = tuple(n for n in disc if bm.in_data_plate(n))
    glob = tuple(n for n in disc if not bm.in_data_plate(n))
    for n in glob:
        if bm.node(n).plates:
            raise EnumerationError(f"discrete unknown '{n}' inside a non-data plate is not enumerable")
    plate = _data_axis_plate(bm, case_nodes)
    for n in case_nodes:
        if bm.node(n).plates != (plate,):
            raise EnumerationError(f"discrete unknown '{n}' must sit directly in the data plate")
    gar = [bm.node(n).domain.size for n in glob]
    car = [bm.node(n).domain.size for n in case_nodes]
    G = int(np.prod(gar)) if gar else 1
    C = int(np.prod(car)) if car else 1
    if G * C > MAX_CONFIGS:
        raise EnumerationError(f"{G * C} latent configurations exceed the limit of {MAX_CONFIGS}")
    gconf = np.array(list(itertools.product(*[range(k) for k in gar])), dtype=float).reshape(G, len(gar))
    cconf = np.array(list(itertools.product(*[range(k) for k in car])), dtype=float).reshape(C, len(car))
    inner, outer = _case_comps(bm, plate)
    states, glogw, clogp = [], [], []
    for gi in range(G):
        base = dict(state)
        for j, n in enumerate(glob):
            base[n] = np.full(bm.full_shape(n), gconf[gi, j])
        per = []
        lps = []
        for ci in range(C):
            st = dict(base)
            for j, n in enumerate(case_nodes):
                _set(bm, st, n, cconf[ci, j])
            lp = _case_logp(bm, st, inner, plate) if plate else np.zeros(0)
            for j, n in enumerate(case_nodes):
                if bm.node(n).observed:
                    obs = bm.observed[n]
                    bad = ~bm.missing[n] & (obs != cconf[ci, j])
                    lp = np.where(bad, -np.inf, lp)
            per.append(st)
            lps.append(lp)
        lps = np.array(lps).reshape(C, -1)
        outer_lp = log_joint(bm, base, outer)
        glogw.append(outer_lp + float(np.sum(logsumexp(lps, axis=0))) if lps.size else outer_lp)
        states.append(per)
        clogp.append(lps)
    glogw = np.array(glogw)
    return _Enumeration(glob, case_nodes, gconf, cconf, states, glogw, clogp, float(logsumexp(glogw)))


def log_marginal(bm, state: dict) -> float:
    """``log p(observed, parameters)`` with discrete unknowns summed out."""
    return _enumerate(bm, state).log_marginal


def responsibilities(bm, state: dict) -> tuple:
    """Posterior over discrete unknowns: ``(global weights (G,), per-case
    weights list of (C, N), enumeration)``."""
    en = _enumerate(bm, state)
    gw = np.exp(en.global_logw - en.log_marginal)
    cw = []
    for lps in en.case_logp:
        if lps.size:
            cw.append(np.exp(lps - logsumexp(lps, axis=0, keepdims=True)))
        else:
            cw.append(lps)
    return gw, cw, en


def log_marginal_grad(
    bm,
    state: dict,
    targets: Optional[Iterable[str]] = None,
    method: str = "inline",
) -> dict:
    """Gradient of :func:`log_marginal` for continuous parameters: the
    posterior expectation of log-joint gradients over discrete unknowns."""
    if targets is None:
        targets = list(bm.parameters)
    targets = list(targets)
    gw, cw, en = responsibilities(bm, state)
    plate = _data_axis_plate(bm, en.case_nodes)
    inner, outer = _case_comps(bm, plate)
    total = {t: np.zeros(bm.full_shape(t)) for t in targets}
    for gi, per in enumerate(en.states):
        if gw[gi] == 0:
            continue
        g = log_joint_grad(bm, per[0], targets, method, components=outer)
        for t in targets:
            total[t] += gw[gi] * g[t]
        for ci, st in enumerate(per):
            r = cw[gi][ci] if cw[gi].size else None
            if r is None or not np.any(r):
                continue

            def weights(comp, _r=r):
                plates = bm.node(comp[0]).plates
                ax = plates.index(plate)
                shape = [1] * len(plates)
                shape[ax] = -1
                return gw[gi] * _r.reshape(shape)

            g = log_joint_grad(bm, st, targets, method, weights=weights, components=inner)
            for t in targets:
                total[t] += g[t]
    return total


def exponential_form_grad(bm, state: dict, param: str) -> np.ndarray:
    """Log-marginal gradient for a Beta or Dirichlet parameter in the
    exponential-family form ``sum_c dw/dtheta^T E[t] - E[n] dlogZ/dtheta``
    plus the prior term, in the descriptor coordinates (the first ``C - 1``
    probabilities, or ``P(x = 1)`` for Bernoulli).
    """
    from plategm.conjugacy import find_groups
    from plategm.expfam.descriptor import descriptor

    groups, _ = find_groups(bm)
    group = next((g for g in groups if param in g.members and g.kind in ("beta", "dirichlet")), None)
    if group is None:
        raise ValueError(f"'{param}' is not a Beta or Dirichlet parameter with categorical children")
    gw, cw, en = responsibilities(bm, state)
    plate = _data_axis_plate(bm, en.case_nodes)
    n = group.n_copies
    et = [group.empty_stats(bm)[c] for c in range(n)]
    for gi, per in enumerate(en.states):
        for ci, st in enumerate(per):
            r = cw[gi][ci] if cw[gi].size else None

            def weights(site, _r=r):
                if _r is None or plate not in bm.node(site).plates:
                    return np.full(bm.plate_shape(site), gw[gi])
                ax = bm.node(site).plates.index(plate)
                shape = [1] * len(bm.node(site).plates)
                shape[ax] = -1
                return gw[gi] * np.broadcast_to(_r.reshape(shape), bm.plate_shape(site))

            if r is None and ci > 0:
                continue
            s = group.stats(bm, st, weights)
            et = [a + b for a, b in zip(et, s)]
    vals = np.asarray(state[param], dtype=float).reshape(n, -1)
    priors = group.priors(bm)
    out = []
    for c in range(n):
        counts = et[c]["counts"]
        if group.kind == "beta":
            th = vals[c, :1]
            fam = descriptor("bernoulli")
            t_exp = counts[1:2]
            a, b = priors[c].a, priors[c].b
            prior_g = (a - 1) / th - (b - 1) / (1 - th)
        else:
            k = vals.shape[1]
            th = vals[c, : k - 1]
            fam = descriptor("multinomial", C=k)
            t_exp = counts[: k - 1]
            alpha = priors[c].alpha
            last = 1 - th.sum()
            prior_g = (alpha[:-1] - 1) / th - (alpha[-1] - 1) / last
        g = fam.dw(th).T @ t_exp - et[c].n * fam.dlog_z(th) + prior_g
        out.append(g)
    return np.array(out).reshape(bm.plate_shape(param) + (-1,))


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_check(
    fn: Callable[[dict], float],
    grad: dict,
    state: dict,
    targets: Optional[Iterable[str]] = None,
    eps: float = 1e-6,
) -> dict:
    """Compare analytic gradients with central differences of ``fn``.

    The relative error of each entry is ``|a - n| / max(|a|, |n|, 1)``.
    Returns ``{target: (max relative error, numeric gradient)}``.
    """
    targets = list(grad) if targets is None else list(targets)
    report = {}
    for t in targets:
        base = np.asarray(state[t], dtype=float)
        num = np.zeros(base.shape)
        for idx in np.ndindex(base.shape):
            vals = []
            for s in (eps, -eps):
                arr = base.copy()
                arr[idx] += s
                st = dict(state)
                st[t] = arr
                vals.append(fn(st))
            num[idx] = (vals[0] - vals[1]) / (2 * eps)
        a = np.asarray(grad[t], dtype=float)
        err = np.abs(a - num) / np.maximum(np.maximum(np.abs(a), np.abs(num)), 1.0)
        report[t] = (float(err.max()) if err.size else 0.0, num)
    return report
