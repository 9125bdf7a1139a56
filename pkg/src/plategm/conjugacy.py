"""Detection of conjugate parameter groups and their sufficient statistics.

A *group* is a set of parameter nodes (one or two roles) whose prior is one of
the shipped conjugate families and whose every child is a *site*: a
stochastic node using the parameters in the matching likelihood pattern, with
all other arguments free of unknown parameters.  Patterns are checked
structurally against a whitelist, not by symbolic algebra.

Given a completed state, a group's statistics are accumulated per parameter
copy; the copy used by each site element is read from the site's reference
(for example ``mu[c]`` selects copy ``c`` case by case).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from plategm.expfam.conjugate import (
    BetaPrior,
    ConjugatePrior,
    DirichletPrior,
    GammaPrior,
    GaussianPrior,
    NormalGammaPrior,
    NormalWishartPrior,
    WishartPrior,
)
from plategm.expfam.stats import SufficientStats, accumulate
from plategm.expr import BinOp, Ref, evaluate, refs
from plategm.semantics import index_arrays, node_context

__all__ = ["Site", "ConjugateGroup", "find_groups", "tainted_nodes"]


@dataclass(frozen=True)
class Site:
    """A child node contributing statistics to a group.

    ``pattern`` is one of ``categorical``, ``linear`` (Gaussian mean or
    weights unknown), ``scale`` (Gaussian precision unknown), ``gamma-rate``,
    ``mvnormal`` and ``wishart``.  ``ref`` is the reference to the first
    group member used to select parameter copies.
    """

    node: str
    pattern: str
    ref: Ref


@dataclass(frozen=True)
class ConjugateGroup:
    kind: str
    roles: dict
    sites: tuple
    plates: tuple = ()
    copy_shape: tuple = field(default=(), compare=False)

    @property
    def members(self) -> tuple:
        return tuple(self.roles.values())

    @property
    def name(self) -> str:
        return "+".join(self.members)

    @property
    def n_copies(self) -> int:
        return int(np.prod(self.copy_shape)) if self.copy_shape else 1

    # -- priors ----------------------------------------------------------------
    def priors(self, bm) -> list[ConjugatePrior]:
        """Prior of every parameter copy (flattened in plate order)."""
        first = self.members[0]
        ctx = node_context(bm, {}, first)
        shape = self.copy_shape
        nb = len(shape)

        def ev(name: str, j: int) -> np.ndarray:
            v = evaluate(bm.node(name).args[j], ctx)
            return np.broadcast_to(v, shape + v.shape[nb:]).reshape((-1,) + v.shape[nb:])

        n = self.n_copies
        k = self.kind
        if k in ("dirichlet",):
            a = ev(self.roles["theta"], 0)
            return [DirichletPrior(a[i]) for i in range(n)]
        if k == "beta":
            a, b = ev(self.roles["theta"], 0), ev(self.roles["theta"], 1)
            return [BetaPrior(float(a[i]), float(b[i])) for i in range(n)]
        if k == "gaussian":
            m, p = ev(self.roles["w"], 0), ev(self.roles["w"], 1)
            d = _dim(bm, self.roles["w"])
            return [GaussianPrior(m[i].reshape(d), p[i].reshape(d, d)) for i in range(n)]
        if k == "normal-gamma":
            w, t = self.roles["w"], self.roles["tau"]
            m = ev(w, 0)
            scale = _scale_factor(bm, w, t, ctx, shape)
            a, b = ev(t, 0), ev(t, 1)
            d = _dim(bm, w)
            return [
                NormalGammaPrior(m[i].reshape(d), scale[i].reshape(d, d), 2 * float(a[i]), 2 * float(b[i]))
                for i in range(n)
            ]
        if k == "gamma-scale" or k == "gamma-rate":
            t = self.roles["tau"]
            a, b = ev(t, 0), ev(t, 1)
            kind = "scale" if k == "gamma-scale" else "gamma-rate"
            return [GammaPrior(float(a[i]), float(b[i]), kind) for i in range(n)]
        if k == "normal-wishart":
            mu, lam = self.roles["mu"], self.roles["lam"]
            m = ev(mu, 0)
            n0 = _scale_factor(bm, mu, lam, ctx, shape)
            dof, sc = ev(lam, 0), ev(lam, 1)
            return [NormalWishartPrior(m[i], float(np.ravel(n0[i])[0]), float(dof[i]), sc[i]) for i in range(n)]
        if k == "wishart":
            lam = self.roles["lam"]
            dof, sc = ev(lam, 0), ev(lam, 1)
            return [WishartPrior(float(dof[i]), sc[i]) for i in range(n)]
        raise ValueError(f"unknown group kind '{k}'")

    # -- statistics ------------------------------------------------------------
    def empty_stats(self, bm) -> list[SufficientStats]:
        return [p.empty_stats() for p in self.priors(bm)]

    def stats(self, bm, state: dict, weights: Optional[Callable] = None) -> list[SufficientStats]:
        """Per-copy statistics of the completed ``state``.

        ``weights(site_name)`` may return per-element weights over the site's
        plate shape (EM responsibilities).
        """
        priors = self.priors(bm)
        out = [p.empty_stats() for p in priors]
        for site in self.sites:
            w = None if weights is None else weights(site.node)
            obs, sel, wflat = _site_data(bm, state, self, site, w)
            if obs is None:
                continue
            n = self.n_copies
            if n == 1:
                out[0] = accumulate(out[0], obs, wflat)
                continue
            for c in np.unique(sel):
                m = sel == c
                part = tuple(o[m] for o in obs) if isinstance(obs, tuple) else obs[m]
                out[c] = accumulate(out[c], part, wflat[m])
        return out

    # -- values ------------------------------------------------------------------
    def assign(self, bm, state: dict, values: list[dict]) -> None:
        """Write per-copy parameter values (keyed by role) into ``state``."""
        for role, name in self.roles.items():
            full = np.array(state.get(name, np.zeros(bm.full_shape(name))), dtype=float)
            vshape = tuple(bm.model.shapes[name])
            flat = full.reshape((-1,) + vshape)
            for i, v in enumerate(values):
                key = role
                val = np.asarray(v[key], dtype=float)
                flat[i] = val.reshape(vshape)
            state[name] = flat.reshape(bm.full_shape(name))

    def values(self, bm, state: dict) -> list[dict]:
        out = [dict() for _ in range(self.n_copies)]
        for role, name in self.roles.items():
            vshape = tuple(bm.model.shapes[name])
            flat = np.asarray(state[name]).reshape((-1,) + vshape)
            for i in range(self.n_copies):
                v = flat[i]
                if role == "w" and v.ndim == 0:
                    v = v.reshape(1)
                out[i][role] = v
        return out


def _dim(bm, name: str) -> int:
    shp = bm.model.shapes[name]
    return int(shp[0]) if shp else 1


def _scale_factor(bm, wname, tname, ctx, shape):
    """Constant ``K`` of a prior precision ``K * T`` (``1`` for a bare ``T``)."""
    prec = bm.node(wname).args[1]
    nb = len(shape)
    k = _split_scaled(prec, tname)
    if k is None:
        v = np.ones(shape)
    else:
        v = evaluate(k, ctx)
        v = np.broadcast_to(v, shape + v.shape[nb:])
    d = _dim(bm, wname)
    v = np.asarray(v).reshape((-1,) + v.shape[nb:])
    if v.ndim == 1:
        v = v[:, None, None] * np.eye(d)
    return v


def _split_scaled(expr, tname):
    """For ``K * T`` or ``T * K`` return ``K``; for ``T`` return None."""
    if isinstance(expr, Ref) and expr.name == tname and not expr.index:
        return None
    if isinstance(expr, BinOp) and expr.op == "*":
        if isinstance(expr.right, Ref) and expr.right.name == tname and not expr.right.index:
            return expr.left
        if isinstance(expr.left, Ref) and expr.left.name == tname and not expr.left.index:
            return expr.right
    raise ValueError("not a scaled reference")


def _flat(a: np.ndarray, shape: tuple, nb: int) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    a = np.broadcast_to(a, shape + a.shape[nb:])
    return a.reshape((-1,) + a.shape[len(shape):])


def _site_data(bm, state, group: ConjugateGroup, site: Site, w):
    node = bm.node(site.node)
    shape = bm.plate_shape(site.node)
    nb = len(shape)
    n = int(np.prod(shape)) if shape else 1
    if n == 0:
        return None, None, None
    ctx = node_context(bm, state, site.node)
    args = node.args
    y = _flat(state[site.node], shape, nb)
    idx = index_arrays(bm, state, site.node, site.ref)
    if idx is None or not group.copy_shape:
        sel = np.zeros(n, dtype=np.int64)
    else:
        sel = np.ravel_multi_index(tuple(np.broadcast_to(i, shape).ravel() for i in idx), group.copy_shape)
    wflat = np.ones(n) if w is None else np.broadcast_to(np.asarray(w, dtype=float), shape).reshape(-1)
    fam = node.family
    p = site.pattern
    if p == "categorical":
        return y, sel, wflat
    if p == "linear":
        if fam == "Gaussian":
            b = np.ones((n, 1))
            lam = _flat(evaluate(args[1], ctx), shape, nb) if group.kind == "gaussian" else np.ones(n)
            return (b, y, lam), sel, wflat
        if fam == "GaussianLinear":
            b = _flat(evaluate(args[1], ctx), shape, nb)
            lam = _flat(evaluate(args[2], ctx), shape, nb) if group.kind == "gaussian" else np.ones(n)
            return (b, y, lam), sel, wflat
        # MvGaussian with a known precision matrix
        d = y.shape[-1]
        b = np.broadcast_to(np.eye(d), (n, d, d))
        lam = _flat(evaluate(args[1], ctx), shape, nb)
        return (b, y, lam), sel, wflat
    if p == "scale":
        if fam == "Gaussian":
            mean = _flat(evaluate(args[0], ctx), shape, nb)
        else:
            wv = _flat(evaluate(args[0], ctx), shape, nb)
            bv = _flat(evaluate(args[1], ctx), shape, nb)
            mean = np.sum(wv * bv, axis=-1)
        return y - mean, sel, wflat
    if p == "gamma-rate":
        alpha = _flat(evaluate(args[0], ctx), shape, nb)
        return (y, alpha), sel, wflat
    if p == "mvnormal":
        return y, sel, wflat
    if p == "wishart":
        mean = _flat(evaluate(args[0], ctx), shape, nb)
        return y - mean, sel, wflat
    raise ValueError(f"unknown site pattern '{p}'")


# ---------------------------------------------------------------------------
# detection


def tainted_nodes(bm, params: set) -> set:
    """Parameters plus deterministic nodes whose value depends on them."""
    out = set(params)
    for name in bm.topo_order:
        node = bm.node(name)
        if node.deterministic and any(r.name in out for r in refs(node.expr)):
            out.add(name)
    return out


def _refnames(e) -> set:
    return {r.name for r in refs(e)}


def _const_expr(bm, e) -> bool:
    """Only constants and plate indices."""
    names = _refnames(e)
    return all(n in bm.model.consts or n in bm.plate_sizes for n in names)


def _is_ref(e, name: str) -> bool:
    return isinstance(e, Ref) and e.name == name


def find_groups(bm, known: frozenset = frozenset()) -> tuple[list[ConjugateGroup], dict]:
    """Conjugate groups among the parameters not listed in ``known``.

    Returns ``(groups, reasons)`` where ``reasons`` maps every parameter left
    out of a group to a short explanation.
    """
    params = [p for p in bm.parameters if p not in known]
    tainted = tainted_nodes(bm, set(params))
    g = bm.graph

    def free(e, allowed=()) -> bool:
        return not (_refnames(e) & (tainted - set(allowed)))

    def index_free(ref: Ref) -> bool:
        return all(free(ix) for ix in ref.index)

    children = {p: [c for c in g.children(p)] for p in params}
    groups: list[ConjugateGroup] = []
    reasons: dict[str, str] = {}
    claimed: set = set()

    def copy_shape(name):
        return bm.plate_shape(name)

    def prior_const(name, skip=()) -> bool:
        return all(_const_expr(bm, a) for j, a in enumerate(bm.node(name).args) if j not in skip)

    # Gaussian-type weights first so precision partners are claimed jointly
    for w in params:
        node = bm.node(w)
        if node.family not in ("Gaussian", "MvGaussian") or w in claimed:
            continue
        if not _const_expr(bm, node.args[0]):
            reasons[w] = "prior mean is not constant"
            continue
        prec = node.args[1]
        partner = None
        kind = None
        if _const_expr(bm, prec):
            kind = "gaussian"
        else:
            for t in params:
                if t == w:
                    continue
                try:
                    k = _split_scaled(prec, t)
                except ValueError:
                    continue
                if k is not None and not _const_expr(bm, k):
                    continue
                tfam = bm.node(t).family
                if tfam == "Gamma" and prior_const(t):
                    kind, partner = "normal-gamma", t
                elif tfam == "Wishart" and node.family == "MvGaussian" and prior_const(t):
                    kind, partner = "normal-wishart", t
                break
        if kind is None:
            reasons[w] = "prior precision is not a constant or a scaled Gamma/Wishart parameter"
            continue
        if partner is not None and bm.node(partner).plates != node.plates:
            reasons[w] = "prior precision parameter lives in different plates"
            continue
        sites = []
        ok = True
        for c in children[w]:
            cn = bm.node(c)
            if cn.deterministic or not cn.args or not _is_ref(cn.args[0], w):
                ok = False
                break
            ref = cn.args[0]
            if not index_free(ref):
                ok = False
                break
            rest = cn.args[1:]
            if kind == "gaussian":
                if cn.family == "Gaussian" and not bm.model.shapes[w] and free(rest[0]):
                    sites.append(Site(c, "linear", ref))
                elif cn.family == "GaussianLinear" and free(rest[0]) and free(rest[1]):
                    sites.append(Site(c, "linear", ref))
                elif cn.family == "MvGaussian" and free(rest[0]):
                    sites.append(Site(c, "linear", ref))
                else:
                    ok = False
                    break
            else:
                pref = rest[-1]
                if not (isinstance(pref, Ref) and pref.name == partner and pref.index == ref.index):
                    ok = False
                    break
                if kind == "normal-gamma":
                    if cn.family == "Gaussian" and not bm.model.shapes[w]:
                        sites.append(Site(c, "linear", ref))
                    elif cn.family == "GaussianLinear" and free(rest[0]):
                        sites.append(Site(c, "linear", ref))
                    else:
                        ok = False
                        break
                else:
                    if cn.family == "MvGaussian":
                        sites.append(Site(c, "mvnormal", ref))
                    else:
                        ok = False
                        break
        if ok and partner is not None:
            site_nodes = {s.node for s in sites}
            extra = set(children[partner]) - site_nodes - {w}
            if extra:
                ok = False
        if not ok:
            reasons[w] = "a child does not use the parameter in a conjugate pattern"
            continue
        if kind == "gaussian":
            roles = {"w": w}
        elif kind == "normal-gamma":
            roles = {"w": w, "tau": partner}
        else:
            roles = {"mu": w, "lam": partner}
        groups.append(ConjugateGroup(kind, roles, tuple(sites), node.plates, copy_shape(w)))
        claimed |= set(roles.values())

    for p in params:
        if p in claimed:
            continue
        node = bm.node(p)
        fam = node.family
        if not prior_const(p):
            reasons[p] = "prior arguments are not constant"
            continue
        sites = []
        ok = True
        if fam in ("Dirichlet", "Beta"):
            want = "Multinomial" if fam == "Dirichlet" else "Bernoulli"
            for c in children[p]:
                cn = bm.node(c)
                if (
                    cn.deterministic
                    or cn.family != want
                    or not _is_ref(cn.args[0], p)
                    or not index_free(cn.args[0])
                ):
                    ok = False
                    break
                sites.append(Site(c, "categorical", cn.args[0]))
            kind = "dirichlet" if fam == "Dirichlet" else "beta"
            roles = {"theta": p}
        elif fam == "Gamma":
            pats = set()
            for c in children[p]:
                cn = bm.node(c)
                if cn.deterministic:
                    ok = False
                    break
                if cn.family in ("Gaussian", "GaussianLinear") and _is_ref(cn.args[-1], p):
                    ref = cn.args[-1]
                    if index_free(ref) and all(free(a) for a in cn.args[:-1]):
                        sites.append(Site(c, "scale", ref))
                        pats.add("scale")
                        continue
                if cn.family == "Gamma" and _is_ref(cn.args[1], p) and free(cn.args[0]):
                    ref = cn.args[1]
                    if index_free(ref):
                        sites.append(Site(c, "gamma-rate", ref))
                        pats.add("gamma-rate")
                        continue
                ok = False
                break
            if len(pats) > 1:
                ok = False
            kind = "gamma-rate" if pats == {"gamma-rate"} else "gamma-scale"
            roles = {"tau": p}
        elif fam == "Wishart":
            for c in children[p]:
                cn = bm.node(c)
                if (
                    cn.deterministic
                    or cn.family != "MvGaussian"
                    or not _is_ref(cn.args[1], p)
                    or not index_free(cn.args[1])
                    or not free(cn.args[0])
                ):
                    ok = False
                    break
                sites.append(Site(c, "wishart", cn.args[1]))
            kind = "wishart"
            roles = {"lam": p}
        else:
            reasons.setdefault(p, f"no conjugate pattern for a {fam} prior")
            continue
        if not ok:
            reasons[p] = "a child does not use the parameter in a conjugate pattern"
            continue
        groups.append(ConjugateGroup(kind, roles, tuple(sites), node.plates, copy_shape(p)))
        claimed.add(p)
    for p in claimed:
        reasons.pop(p, None)
    return groups, reasons
