"""Vectorised log-densities and gradients of a bound model.

Every chain component ``C`` contributes ``log p(C | parents)`` per plate copy.
Singleton components are the node's family log-density.  Components joined
by ``link`` potentials are normalised by enumerating their joint values, so
their gradient includes the expected-potential term of the normaliser.

Deterministic nodes are evaluated inline: a reference to one evaluates its
expression with the referring copy's plate indices, so reverse-mode gradients
flow through islands of deterministic nodes to their stochastic inputs.
"""

from __future__ import annotations

import itertools
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

from plategm.expr import EvalContext, ExprError, Ref, evaluate, forward, jvp, unbroadcast

__all__ = [
    "ModelContext",
    "GradSink",
    "node_context",
    "node_args",
    "component_logp",
    "component_grad",
    "log_joint",
    "log_joint_terms",
    "grad_log_joint",
    "index_arrays",
]


class GradSink:
    """Accumulates gradients into full-shape arrays keyed by node name."""

    def __init__(self, bm, only: Optional[set] = None):
        self.bm = bm
        self.only = only
        self.grads: dict[str, np.ndarray] = {}

    def wants(self, name: str) -> bool:
        return self.only is None or name in self.only

    def add(self, name: str, idx: Optional[tuple], grad: np.ndarray, nb: int) -> None:
        if not self.wants(name):
            return
        g = self.grads.get(name)
        if g is None:
            g = self.grads[name] = np.zeros(self.bm.full_shape(name))
        if idx is None:
            g += grad.sum(axis=tuple(range(nb))) if nb else grad
            return
        batch = grad.shape[:nb]
        full = tuple(np.broadcast_to(i, batch) for i in idx)
        np.add.at(g, full, grad)


class ModelContext(EvalContext):
    """Resolves references against a state with some plates bound to index arrays.

    ``leaf_det`` lists deterministic nodes treated as leaves: their values are
    still computed, but reverse-mode gradients stop at them and are recorded
    in the sink (local partial derivatives).
    """

    def __init__(
        self,
        bm,
        state: dict,
        bound: dict,
        nb: int,
        sink: Optional[GradSink] = None,
        tangents: Optional[dict] = None,
        leaf_det: frozenset = frozenset(),
        need_grad: bool = False,
    ):
        self.bm = bm
        self.state = state
        self.bound = bound
        self.nb = nb
        self.sink = sink
        self.tangents = tangents or {}
        self.leaf_det = leaf_det
        self.need_grad = need_grad

    def _sub(self, bound: dict, nb: int) -> "ModelContext":
        return ModelContext(
            self.bm, self.state, bound, nb, self.sink, self.tangents, self.leaf_det, self.need_grad
        )

    def indices(self, ref: Ref) -> Optional[tuple]:
        """Copy index arrays selected by ``ref`` (None for plate-free nodes)."""
        node = self.bm.node(ref.name)
        if not node.plates:
            if ref.index:
                raise ExprError(f"'{ref.name}' is not in a plate")
            return None
        it = iter(ref.index)
        out = []
        for q in node.plates:
            if q in self.bound:
                out.append(np.asarray(self.bound[q]))
                continue
            try:
                e = next(it)
            except StopIteration:
                raise ExprError(f"missing index for plate '{q}' of '{ref.name}'") from None
            v = evaluate(e, self)
            if v.ndim != self.nb:
                raise ExprError(f"index of '{ref.name}' must be a scalar")
            size = self.bm.plate_size(q)
            if np.any(np.isnan(v)):
                raise ExprError(f"index of '{ref.name}' is unknown")
            iv = np.rint(v).astype(np.int64)
            if np.any((iv < 0) | (iv >= size)):
                raise ExprError(f"index of '{ref.name}' outside 0..{size - 1}")
            out.append(iv)
        if next(it, None) is not None:
            raise ExprError(f"too many indices for '{ref.name}'")
        shape = np.broadcast_shapes(*[a.shape for a in out])
        return tuple(np.broadcast_to(a, shape) for a in out)

    def gather(self, ref: Ref):
        name = ref.name
        bm = self.bm
        if name in bm.model.consts:
            return np.full((1,) * self.nb, float(bm.model.consts[name])), None
        if name in self.bound and name in bm.plate_sizes:
            return np.asarray(self.bound[name], dtype=float), None
        node = bm.node(name)
        idx = self.indices(ref)
        if node.deterministic and name not in self.leaf_det:
            if idx is None:
                sub = self._sub({}, self.nb)
            else:
                sub = self._sub(dict(zip(node.plates, idx)), self.nb)
            value, back = forward(node.expr, sub, self.need_grad)
            return value, ("det", back, sub)
        if node.deterministic:
            full = det_value(bm, self.state, name)
        else:
            full = self.state[name]
        if idx is None:
            value = full.reshape((1,) * self.nb + full.shape)
        else:
            value = full[idx]
        return value, ("leaf", name, idx)

    def scatter(self, ref: Ref, key, grad: np.ndarray) -> None:
        if key is None:
            return
        if key[0] == "det":
            key[1](grad)
            return
        if self.sink is not None:
            self.sink.add(key[1], key[2], grad, self.nb)

    def tangent(self, ref: Ref, key, value):
        if key is None:
            return None
        if key[0] == "det":
            node = self.bm.node(ref.name)
            return jvp(node.expr, key[2])[1]
        t = self.tangents.get(key[1])
        if t is None:
            return None
        idx = key[2]
        if idx is None:
            return t.reshape((1,) * self.nb + t.shape)
        return t[idx]

    def plate_sum(self, plate: str):
        size = self.bm.plate_size(plate)
        bound = {k: np.asarray(v)[..., None] for k, v in self.bound.items()}
        bound[plate] = np.arange(size).reshape((1,) * self.nb + (size,))
        return self._sub(bound, self.nb + 1), self.nb

    def plate_size(self, plate: str) -> int:
        return self.bm.plate_size(plate)


def node_context(bm, state, name: str, **kw) -> ModelContext:
    """Context binding every plate of ``name`` along its own batch axis."""
    plates = bm.node(name).plates
    nb = len(plates)
    bound = {}
    for j, p in enumerate(plates):
        shape = [1] * nb
        shape[j] = bm.plate_size(p)
        bound[p] = np.arange(bm.plate_size(p)).reshape(shape)
    return ModelContext(bm, state, bound, nb, **kw)


def index_arrays(bm, state, site: str, ref: Ref) -> Optional[tuple]:
    """Copy indices of ``ref`` selected by each plate copy of ``site``."""
    ctx = node_context(bm, state, site)
    idx = ctx.indices(ref)
    if idx is None:
        return None
    shape = bm.plate_shape(site)
    return tuple(np.broadcast_to(i, np.broadcast_shapes(i.shape, shape)) for i in idx)


def det_value(bm, state, name: str) -> np.ndarray:
    """Full array of a deterministic node."""
    ctx = node_context(bm, state, name)
    v = evaluate(bm.node(name).expr, ctx)
    return np.broadcast_to(v, bm.full_shape(name)).copy()


def node_args(bm, state, name: str, ctx: Optional[ModelContext] = None) -> list:
    ctx = ctx or node_context(bm, state, name)
    return [evaluate(a, ctx) for a in bm.node(name).args]


# ---------------------------------------------------------------------------
# log densities


def _enumerate_component(bm, state, comp: tuple, ctx: ModelContext, need_grad: bool):
    """Unnormalised log-potential of every joint configuration of ``comp``.

    Returns ``(configs, logpot, parts)`` where ``logpot`` has shape
    ``batch + (K,)`` and ``parts`` holds what the gradient needs.
    """
    nb = ctx.nb
    arities = [bm.node(n).domain.size for n in comp]
    configs = np.array(list(itertools.product(*[range(k) for k in arities])), dtype=float)
    K = configs.shape[0]
    node_tabs = []
    for j, n in enumerate(comp):
        fam = bm.family(n)
        args = [evaluate(a, ctx) for a in bm.node(n).args]
        k = arities[j]
        vals = np.arange(k, dtype=float).reshape((1,) * nb + (k,))
        # evaluate the family at each candidate value on one extra batch axis
        ex = [_expand_arg(a, nb) for a in args]
        lp = fam.logpdf(vals, ex, nb + 1)
        node_tabs.append((n, k, args, lp))
    link_tabs = []
    for lk in bm.links_of.get(comp, []):
        if need_grad:
            parts = [forward(e, ctx, True) for e in lk.table]
        else:
            parts = [(evaluate(e, ctx), None) for e in lk.table]
        vals = [p[0] for p in parts]
        shape = np.broadcast_shapes(*[v.shape for v in vals])
        tab = np.stack([np.broadcast_to(v, shape) for v in vals], axis=-1)
        link_tabs.append((lk, comp.index(lk.a), comp.index(lk.b), bm.node(lk.b).domain.size, tab, parts))
    batch = ()
    for _, _, _, lp in node_tabs:
        batch = np.broadcast_shapes(batch, lp.shape[:nb])
    for t in link_tabs:
        batch = np.broadcast_shapes(batch, t[4].shape[:nb])
    logpot = np.zeros(batch + (K,))
    ci = configs.astype(np.int64)
    for j, (_, k, _, lp) in enumerate(node_tabs):
        logpot = logpot + np.take(lp, ci[:, j], axis=-1)
    for lk, ja, jb, kb, tab, _ in link_tabs:
        logpot = logpot + np.take(tab, ci[:, ja] * kb + ci[:, jb], axis=-1)
    return configs, logpot, (node_tabs, link_tabs)


def _expand_arg(a: np.ndarray, nb: int) -> np.ndarray:
    """Insert a singleton batch axis after the first ``nb`` axes."""
    return a.reshape(a.shape[:nb] + (1,) + a.shape[nb:])


def _config_index(bm, state, comp: tuple, configs: np.ndarray, batch_shape) -> np.ndarray:
    k = np.array([bm.node(n).domain.size for n in comp])
    idx = np.zeros(batch_shape, dtype=np.int64)
    for j, n in enumerate(comp):
        idx = idx * k[j] + np.broadcast_to(state[n], batch_shape).astype(np.int64)
    return idx


def component_logp(bm, state: dict, comp: tuple) -> np.ndarray:
    """``log p(component | parents)`` per plate copy (shape: plate sizes)."""
    shape = bm.plate_shape(comp[0])
    if len(comp) == 1:
        name = comp[0]
        node = bm.node(name)
        ctx = node_context(bm, state, name)
        args = [evaluate(a, ctx) for a in node.args]
        lp = bm.family(name).logpdf(state[name], args, len(node.plates))
        return np.broadcast_to(lp, shape)
    ctx = node_context(bm, state, comp[0])
    configs, logpot, _ = _enumerate_component(bm, state, comp, ctx, False)
    logpot = np.broadcast_to(logpot, shape + logpot.shape[-1:])
    idx = _config_index(bm, state, comp, configs, shape)
    obs = np.take_along_axis(logpot, idx[..., None], axis=-1)[..., 0]
    return obs - logsumexp(logpot, axis=-1)


def log_joint_terms(bm, state: dict) -> dict:
    """Total log-density contributed by each chain component."""
    return {c: float(np.sum(component_logp(bm, state, c))) for c in bm.components}


def log_joint(bm, state: dict, components=None) -> float:
    comps = bm.components if components is None else components
    return float(sum(np.sum(component_logp(bm, state, c)) for c in comps))


# ---------------------------------------------------------------------------
# gradients


def component_grad(
    bm,
    state: dict,
    comp: tuple,
    sink: GradSink,
    weight=None,
    leaf_det: frozenset = frozenset(),
) -> None:
    """Accumulate ``d/d(inputs) sum(weight * log p(comp | parents))`` into ``sink``."""
    shape = bm.plate_shape(comp[0])
    w = np.ones(shape) if weight is None else np.broadcast_to(weight, shape)
    nb = len(shape)
    if len(comp) == 1:
        name = comp[0]
        node = bm.node(name)
        ctx = node_context(bm, state, name, sink=sink, leaf_det=leaf_det, need_grad=True)
        parts = [forward(a, ctx, True) for a in node.args]
        args = [p[0] for p in parts]
        gx, gargs = bm.family(name).grad(state[name], args, nb)
        if gx is not None:
            sink.add(name, None, _weighted(w, gx, nb, bm.full_shape(name)), 0)
        for (val, back), g in zip(parts, gargs):
            if g is None:
                continue
            g = np.asarray(g)
            g = g * w.reshape(w.shape + (1,) * (g.ndim - nb))
            back(unbroadcast(np.broadcast_to(g, np.broadcast_shapes(g.shape, val.shape)), val.shape, nb))
        return
    ctx = node_context(bm, state, comp[0], sink=sink, leaf_det=leaf_det, need_grad=True)
    configs, logpot, (node_tabs, link_tabs) = _enumerate_component(bm, state, comp, ctx, True)
    logpot = np.broadcast_to(logpot, shape + logpot.shape[-1:])
    idx = _config_index(bm, state, comp, configs, shape)
    probs = np.exp(logpot - logsumexp(logpot, axis=-1, keepdims=True))
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    dcfg = (onehot - probs) * w[..., None]
    ci = configs.astype(np.int64)
    # node potentials: d/d args of logpdf(v) weighted by marginal coefficients
    for j, (n, k, args, _) in enumerate(node_tabs):
        coef = np.zeros(shape + (k,))
        for v in range(k):
            coef[..., v] = dcfg[..., ci[:, j] == v].sum(axis=-1)
        node = bm.node(n)
        parts = [forward(a, ctx, True) for a in node.args]
        fam = bm.family(n)
        for v in range(k):
            _, gargs = fam.grad(np.full(shape, float(v)), [p[0] for p in parts], nb)
            for (val, back), g in zip(parts, gargs):
                if g is None:
                    continue
                g = np.asarray(g)
                c = coef[..., v].reshape(shape + (1,) * (g.ndim - nb))
                gg = g * c
                back(unbroadcast(np.broadcast_to(gg, np.broadcast_shapes(gg.shape, val.shape)), val.shape, nb))
    for lk, ja, jb, kb, tab, parts in link_tabs:
        cell = ci[:, ja] * kb + ci[:, jb]
        for e_i, (val, back) in enumerate(parts):
            g = dcfg[..., cell == e_i].sum(axis=-1)
            back(unbroadcast(np.broadcast_to(g, np.broadcast_shapes(g.shape, val.shape)), val.shape, nb))


def _weighted(w, gx, nb, full_shape):
    gx = np.asarray(gx)
    gx = np.broadcast_to(gx, full_shape) if gx.shape != tuple(full_shape) else gx
    return gx * w.reshape(w.shape + (1,) * (gx.ndim - nb))


def grad_log_joint(
    bm,
    state: dict,
    only: Optional[set] = None,
    weights: Optional[Callable] = None,
    components=None,
    leaf_det: frozenset = frozenset(),
) -> dict:
    """Gradient of the (optionally weighted) log joint with respect to every
    stochastic node, as full-shape arrays.

    ``weights(comp)`` may return per-copy weights for a component's terms.
    """
    sink = GradSink(bm, only)
    comps = bm.components if components is None else components
    for c in comps:
        w = None if weights is None else weights(c)
        component_grad(bm, state, c, sink, w, leaf_det)
    return sink.grads
