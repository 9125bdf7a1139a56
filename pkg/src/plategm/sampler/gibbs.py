"""Gibbs sampling over bound models.

Each sweep visits the unknowns in a fixed schedule:

* discrete unknowns are drawn from their full conditional, enumerated over
  the node's values using only the components in its Markov blanket
  (all plate copies at once when the copies are conditionally independent);
* missing continuous cells of childless nodes are drawn from their
  conditional, other missing cells by a random-walk Metropolis step;
* conjugate parameter groups are drawn from their posterior given the
  sufficient statistics of the completed data, one pass over the cases;
* remaining continuous parameters take a random-walk Metropolis step whose
  acceptance ratio uses only the blanket components.

Models whose unknowns are all discrete and outside plates use a precomputed
joint table, which keeps long runs on small networks fast.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from plategm.conjugacy import ConjugateGroup, find_groups
from plategm.expr import BinOp, Call, Compare, Neg, PlateSum, Ref, Vector
from plategm.semantics import component_logp, log_joint

__all__ = [
    "GibbsConfig",
    "GibbsError",
    "Update",
    "GibbsSchedule",
    "Trace",
    "build_schedule",
    "full_conditional",
    "gibbs_run",
    "canonicalize_labels",
    "label_structure",
    "effective_sample_size",
    "flat_columns",
    "chain_rng",
]


class GibbsError(ValueError):
    """Gibbs sampling does not apply (for example a zero-probability conditional)."""


@dataclass(frozen=True)
class GibbsConfig:
    """Run length and recording options; ``burnin`` defaults to ``iters // 10``."""

    iters: int = 1000
    burnin: Optional[int] = None
    thin: int = 1
    chains: int = 1
    seed: int = 0
    record: Optional[tuple] = None
    canonicalize: bool = True

    def __post_init__(self):
        if self.iters < 0 or self.thin < 1 or self.chains < 1:
            raise ValueError("iters must be >= 0, thin and chains >= 1")
        if self.burnin is not None and not 0 <= self.burnin <= self.iters:
            raise ValueError("burnin must lie in 0..iters")

    @property
    def n_burnin(self) -> int:
        return self.iters // 10 if self.burnin is None else self.burnin

    @property
    def n_rows(self) -> int:
        return (self.iters - self.n_burnin) // self.thin


@dataclass(frozen=True)
class Update:
    target: str
    method: str
    blanket: frozenset = frozenset()
    group: Optional[ConjugateGroup] = None


@dataclass(frozen=True)
class GibbsSchedule:
    updates: tuple

    @property
    def targets(self) -> list[str]:
        return [u.target for u in self.updates]


@dataclass
class Trace:
    """Recorded draws: one row per kept iteration and chain."""

    columns: list
    rows: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.rows.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.rows[:, self.columns.index(name)]

    def chain(self, c: int) -> "Trace":
        m = self.column("chain") == c
        return Trace(self.columns, self.rows[m], self.meta)

    def write_csv(self, target) -> None:
        """Write to a path or an open text stream."""
        if hasattr(target, "write"):
            self._write(target)
            return
        with open(target, "w", newline="") as fh:
            self._write(fh)

    def _write(self, fh) -> None:
        ints = {"chain", "iteration", "model-id"}
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([str(int(v)) if c in ints else repr(float(v)) for c, v in zip(self.columns, r)])


def chain_rng(seed: int, chain: int) -> np.random.Generator:
    """Independent stream for one chain, derived from ``(seed, chain)``."""
    return np.random.default_rng([int(seed), int(chain)])


def flat_columns(bm, names: Sequence[str]) -> list[str]:
    """Column names ``name`` or ``name[i,j]`` for every element of each node."""
    cols = []
    for n in names:
        shape = bm.full_shape(n)
        if not shape:
            cols.append(n)
        else:
            cols += [f"{n}[{','.join(map(str, ix))}]" for ix in np.ndindex(shape)]
    return cols


# ---------------------------------------------------------------------------
# schedule


def _blanket_components(bm, name: str) -> tuple:
    comp_of = bm.component_of
    comps = [comp_of[name]]
    for c in sorted(bm.graph.ndchildren(name), key=bm.topo_order.index):
        cc = comp_of[c]
        if cc not in comps:
            comps.append(cc)
    return tuple(comps)


def _implicit_only(bm, expr, target: str, in_sum: bool = False, seen=None) -> bool:
    """True when every path from ``expr`` to ``target`` uses implicit
    (same-copy) references outside plate sums."""
    seen = set() if seen is None else seen
    if isinstance(expr, Ref):
        if expr.name == target:
            return not expr.index and not in_sum
        if not all(_implicit_only(bm, i, target, in_sum, seen) for i in expr.index):
            return False
        if expr.name in bm.model.consts or expr.name in bm.plate_sizes:
            return True
        node = bm.node(expr.name)
        if node.deterministic:
            if expr.name in seen:
                return True
            seen.add(expr.name)
            ok = _implicit_only(bm, node.expr, target, False, seen)
            if not ok:
                return False
            # an indexed reference to a det node that depends on the target
            # selects another copy
            depends = _depends_on(bm, expr.name, target)
            return not (depends and (expr.index or in_sum))
        return True
    if isinstance(expr, PlateSum):
        return _implicit_only(bm, expr.body, target, True, seen)
    if isinstance(expr, Neg):
        return _implicit_only(bm, expr.arg, target, in_sum, seen)
    if isinstance(expr, (BinOp, Compare)):
        return _implicit_only(bm, expr.left, target, in_sum, seen) and _implicit_only(
            bm, expr.right, target, in_sum, seen
        )
    if isinstance(expr, (Call,)):
        return all(_implicit_only(bm, a, target, in_sum, seen) for a in expr.args)
    if isinstance(expr, Vector):
        return all(_implicit_only(bm, a, target, in_sum, seen) for a in expr.items)
    return True


def _depends_on(bm, det: str, target: str) -> bool:
    stack, seen = [det], set()
    while stack:
        d = stack.pop()
        if d in seen:
            continue
        seen.add(d)
        for p in bm.graph.parents(d):
            if p == target:
                return True
            if bm.node(p).deterministic:
                stack.append(p)
    return False


def _vectorizable(bm, name: str, comps: tuple) -> bool:
    plates = set(bm.node(name).plates)
    if not plates:
        return True
    for comp in comps:
        cp = set(bm.node(comp[0]).plates)
        if not plates <= cp:
            return False
        exprs = []
        for n in comp:
            exprs += list(bm.node(n).args)
        for lk in bm.links_of.get(comp, []):
            exprs += list(lk.table)
        if not all(_implicit_only(bm, e, name) for e in exprs):
            return False
    return True


def build_schedule(bm, groups: Optional[list] = None) -> GibbsSchedule:
    """Update order: discrete unknowns, missing continuous cells, conjugate
    groups, then Metropolis steps for the remaining parameters."""
    if groups is None:
        groups, _ = find_groups(bm)
    g = bm.graph
    ups = []
    for n in bm.topo_order:
        if n in bm.discrete_unknowns:
            ups.append(Update(n, "enumerate-discrete", frozenset(_blanket(bm, n))))
    for n in bm.topo_order:
        if n in bm.unknowns and not bm.node(n).domain.is_discrete and n not in bm.parameters:
            method = "predictive-draw" if not g.ndchildren(n) and len(bm.component_of[n]) == 1 else "clique-ratio"
            ups.append(Update(n, method, frozenset(_blanket(bm, n))))
    claimed = set()
    for grp in groups:
        ups.append(Update(grp.name, "conjugate-draw", frozenset(), grp))
        claimed |= set(grp.members)
    for n in bm.parameters:
        if n not in claimed:
            ups.append(Update(n, "clique-ratio", frozenset(_blanket(bm, n))))
    return GibbsSchedule(tuple(ups))


def _blanket(bm, name: str) -> set:
    from plategm.graph.ops import markov_blanket

    try:
        return markov_blanket(bm.graph, name)
    except Exception:  # deterministic or malformed; the schedule still works
        return set()


# ---------------------------------------------------------------------------
# conditionals


def _reduce_to(bm, lp: np.ndarray, comp: tuple, name: str) -> np.ndarray:
    """Sum a component's per-copy log densities onto ``name``'s plate axes."""
    cplates = bm.node(comp[0]).plates
    tplates = bm.node(name).plates
    lp = np.broadcast_to(lp, bm.plate_shape(comp[0]))
    extra = tuple(i for i, p in enumerate(cplates) if p not in tplates)
    if extra:
        lp = lp.sum(axis=extra)
    kept = [p for p in cplates if p in tplates]
    perm = [kept.index(p) for p in tplates]
    return np.transpose(lp, perm) if perm else lp


def full_conditional(bm, state: dict, target: str, comps: Optional[tuple] = None) -> np.ndarray:
    """Normalised conditional of a discrete unknown given everything else.

    Returns probabilities of shape ``plate_shape(target) + (k,)``.
    """
    node = bm.node(target)
    if not node.domain.is_discrete:
        raise GibbsError(f"'{target}' is not discrete")
    comps = comps or _blanket_components(bm, target)
    k = node.domain.size
    shape = bm.plate_shape(target)
    logits = np.zeros(shape + (k,))
    cur = state[target]
    if _vectorizable(bm, target, comps):
        for v in range(k):
            st = dict(state)
            st[target] = np.full_like(cur, float(v))
            tot = np.zeros(shape)
            for c in comps:
                tot = tot + _reduce_to(bm, component_logp(bm, st, c), c, target)
            logits[..., v] = tot
    else:
        for idx in np.ndindex(shape):
            for v in range(k):
                arr = np.array(cur)
                arr[idx] = v
                st = dict(state)
                st[target] = arr
                logits[idx + (v,)] = sum(float(np.sum(component_logp(bm, st, c))) for c in comps)
    with np.errstate(invalid="ignore"):
        mx = logits.max(axis=-1, keepdims=True)
    if np.any(~np.isfinite(mx)):
        raise GibbsError(f"all values of '{target}' have zero probability given the rest")
    p = np.exp(logits - mx)
    return p / p.sum(axis=-1, keepdims=True)


def _categorical(rng, p: np.ndarray) -> np.ndarray:
    u = rng.random(p.shape[:-1] + (1,))
    return np.minimum((np.cumsum(p, axis=-1) < u).sum(axis=-1), p.shape[-1] - 1)


# ---------------------------------------------------------------------------
# symmetry breaking


@dataclass(frozen=True)
class LabelStructure:
    latent: str
    weights: str
    plate: str
    params: tuple


def label_structure(bm) -> Optional[LabelStructure]:
    """Find a hidden class ``z ~ Multinomial(phi)`` whose value indexes the
    parameters of one plate; None for models without exchangeable labels."""
    for z in bm.discrete_unknowns:
        node = bm.node(z)
        if node.observed or node.family != "Multinomial":
            continue
        a = node.args[0]
        if not isinstance(a, Ref) or a.index:
            continue
        plate = None
        params = []
        for c in bm.graph.ndchildren(z):
            for arg in bm.node(c).args:
                for r in _refs(arg):
                    if any(isinstance(i, Ref) and i.name == z for i in r.index):
                        tp = bm.node(r.name).plates
                        free = [p for p in tp if p not in bm.node(c).plates]
                        pos = [j for j, i in enumerate(r.index) if isinstance(i, Ref) and i.name == z]
                        q = free[pos[0]]
                        if plate is None:
                            plate = q
                        elif plate != q:
                            return None
                        if r.name not in params:
                            params.append(r.name)
        if plate is None or bm.plate_size(plate) != node.domain.size:
            continue
        # every parameter in the class plate moves with the label
        for p in bm.parameters:
            if plate in bm.node(p).plates and p not in params:
                params.append(p)
        return LabelStructure(z, a.name, plate, tuple(params))
    return None


def _refs(e):
    from plategm.expr import refs

    return refs(e)


def canonicalize_labels(bm, state: dict, key: Optional[str] = None) -> tuple[dict, np.ndarray]:
    """Relabel mixture components so the key parameter increases.

    Returns the relabelled state and the permutation ``perm`` (new label
    ``j`` is old label ``perm[j]``).  Ties fall through to the next element
    of the key, then to the original order.
    """
    ls = label_structure(bm)
    if ls is None:
        return state, np.arange(0)
    k = bm.plate_size(ls.plate)
    key = key or next((p for p in ls.params if p in state), None)
    if key is None:
        return state, np.arange(k)
    ax = bm.node(key).plates.index(ls.plate)
    kv = np.moveaxis(np.asarray(state[key]), ax, 0).reshape(k, -1)
    perm = np.array(sorted(range(k), key=lambda i: (tuple(kv[i]), i)))
    if np.array_equal(perm, np.arange(k)):
        return state, perm
    out = dict(state)
    for p in ls.params:
        a = bm.node(p).plates.index(ls.plate)
        out[p] = np.take(np.asarray(state[p]), perm, axis=a)
    w = np.asarray(state[ls.weights])
    wp = bm.node(ls.weights).plates
    out[ls.weights] = np.take(w, perm, axis=len(wp))
    inv = np.argsort(perm)
    z = np.asarray(state[ls.latent])
    out[ls.latent] = inv[z.astype(np.int64)].astype(float)
    return out, perm


# ---------------------------------------------------------------------------
# effective sample size


def effective_sample_size(x: np.ndarray) -> float:
    """Autocorrelation-based ESS using Geyer's initial positive sequence."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 4 or np.var(x) == 0:
        return float(n)
    xc = x - x.mean()
    f = np.fft.rfft(xc, 2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:n]
    acf /= acf[0]
    s = 0.0
    for t in range(1, n - 1, 2):
        pair = acf[t] + acf[t + 1]
        if pair < 0:
            break
        s += pair
    tau = -1.0 + 2.0 * (1.0 + s)
    return float(n / max(tau, 1e-12))


# ---------------------------------------------------------------------------
# sampler


class _Sampler:
    def __init__(self, bm, schedule: GibbsSchedule, rng: np.random.Generator):
        self.bm = bm
        self.schedule = schedule
        self.rng = rng
        self.comps = {u.target: _blanket_components(bm, u.target) for u in schedule.updates if u.group is None}
        self.vector = {t: _vectorizable(bm, t, c) for t, c in self.comps.items()}
        self.step = {u.target: 0.5 for u in schedule.updates if u.method == "clique-ratio"}
        self.accepts = {t: [0, 0] for t in self.step}

    def sweep(self, state: dict, adapt: bool = False) -> dict:
        for u in self.schedule.updates:
            if u.method == "enumerate-discrete":
                self._discrete(state, u.target)
            elif u.method == "predictive-draw":
                self._predictive(state, u.target)
            elif u.method == "conjugate-draw":
                self._conjugate(state, u.group)
            else:
                self._metropolis(state, u.target, adapt)
        return state

    def _discrete(self, state, name):
        p = full_conditional(self.bm, state, name, self.comps[name])
        draw = _categorical(self.rng, p).astype(float)
        if self.bm.node(name).observed:
            m = self.bm.missing[name]
            cur = np.array(state[name])
            cur[m] = draw[m]
            state[name] = cur
        else:
            state[name] = draw

    def _predictive(self, state, name):
        bm = self.bm
        from plategm.semantics import node_args

        nb = len(bm.node(name).plates)
        ps = bm.plate_shape(name)
        args = [np.broadcast_to(a, ps + a.shape[nb:]) for a in node_args(bm, state, name)]
        draw = np.broadcast_to(bm.family(name).sample(self.rng, args, nb), bm.full_shape(name))
        m = bm.missing[name]
        cur = np.array(state[name])
        cur[m] = draw[m]
        state[name] = cur

    def _conjugate(self, state, group: ConjugateGroup):
        bm = self.bm
        priors = group.priors(bm)
        stats = group.stats(bm, state)
        vals = [p.posterior(s).sample(self.rng) for p, s in zip(priors, stats)]
        group.assign(bm, state, vals)

    def _blanket_logp(self, state, name) -> np.ndarray:
        bm = self.bm
        comps = self.comps[name]
        shape = bm.plate_shape(name)
        if self.vector[name]:
            tot = np.zeros(shape)
            for c in comps:
                tot = tot + _reduce_to(bm, component_logp(bm, state, c), c, name)
            return tot
        return np.array(sum(float(np.sum(component_logp(bm, state, c))) for c in comps))

    def _metropolis(self, state, name, adapt):
        bm = self.bm
        cur = np.asarray(state[name], dtype=float)
        mask = bm.missing[name] if bm.node(name).observed else None
        with np.errstate(all="ignore"):
            old = self._blanket_logp(state, name)
            prop = cur + self.step[name] * self.rng.standard_normal(cur.shape)
            if mask is not None:
                prop = np.where(_expand(mask, prop), prop, cur)
            st = dict(state)
            st[name] = prop
            new = self._blanket_logp(st, name)
        new = np.where(np.isfinite(new), new, -np.inf)
        if self.vector[name] and old.ndim:
            acc = np.log(self.rng.random(old.shape)) < new - old
            vshape = (1,) * (cur.ndim - acc.ndim)
            state[name] = np.where(acc.reshape(acc.shape + vshape), prop, cur)
            rate = float(acc.mean())
        else:
            acc = bool(np.log(self.rng.random()) < float(new) - float(old))
            if acc:
                state[name] = prop
            rate = float(acc)
        a = self.accepts[name]
        a[0] += rate
        a[1] += 1
        if adapt and a[1] % 20 == 0:
            r = a[0] / a[1]
            self.step[name] *= 1.5 if r > 0.4 else (0.6 if r < 0.2 else 1.0)
            self.accepts[name] = [0, 0]


def _expand(mask, arr):
    return np.reshape(mask, mask.shape + (1,) * (arr.ndim - mask.ndim))


class _TableSampler:
    """All unknowns discrete and outside plates: Gibbs on the enumerated joint."""

    def __init__(self, bm, names: tuple, rng):
        self.bm = bm
        self.names = names
        self.rng = rng
        arities = [bm.node(n).domain.size for n in names]
        base = bm.observed_state()
        self.table = np.zeros(arities)
        for cfg in itertools.product(*[range(k) for k in arities]):
            st = dict(base)
            for n, v in zip(names, cfg):
                st[n] = np.array(float(v))
            self.table[cfg] = log_joint(bm, st)
        if not np.any(np.isfinite(self.table)):
            raise GibbsError("the observed values have zero probability")

    def sweep(self, cfg: list) -> list:
        for j in range(len(self.names)):
            idx = list(cfg)
            idx[j] = slice(None)
            lp = self.table[tuple(idx)]
            mx = lp.max()
            if not np.isfinite(mx):
                raise GibbsError(f"all values of '{self.names[j]}' have zero probability given the rest")
            p = np.exp(lp - mx)
            c = np.cumsum(p)
            cfg[j] = int(min(np.searchsorted(c, self.rng.random() * c[-1], side="right"), p.size - 1))
        return cfg


def _record_names(bm, cfg: GibbsConfig) -> list:
    if cfg.record is not None:
        return list(cfg.record)
    out = list(bm.parameters)
    out += [n for n in bm.discrete_unknowns if not bm.in_data_plate(n)]
    return [n for n in bm.topo_order if n in out]


def _fixed_params(bm) -> tuple:
    # Parameters whose values make the rest conditionally conjugate.
    from plategm.decompose import classify_schema

    try:
        return classify_schema(bm).fixed
    except ValueError:
        return ()


def gibbs_run(bm, cfg: GibbsConfig = GibbsConfig(), state: Optional[dict] = None) -> Trace:
    """Run ``cfg.chains`` independent chains and return the merged trace.

    Iterations are numbered from 1; rows are kept at iterations
    ``burnin + thin * k`` for ``k = 1, 2, ...``.
    """
    names = _record_names(bm, cfg)
    cols = flat_columns(bm, names) + ["logjoint", "chain", "iteration"]
    groups, _ = find_groups(bm, known=frozenset(_fixed_params(bm)))
    schedule = build_schedule(bm, groups)
    burn, thin = cfg.n_burnin, cfg.thin
    rows = []
    static = (
        bm.unknowns
        and not bm.parameters
        and all(bm.node(n).domain.is_discrete and not bm.node(n).plates for n in bm.unknowns)
    )
    label = label_structure(bm) if cfg.canonicalize else None
    for chain in range(cfg.chains):
        rng = chain_rng(cfg.seed, chain)
        if static:
            ts = _TableSampler(bm, tuple(bm.unknowns), rng)
            cur = [int(v) for v in rng.integers(0, [bm.node(n).domain.size for n in ts.names])]
            pos = [ts.names.index(n) if n in ts.names else None for n in names]
            base = bm.observed_state()
            for t in range(1, cfg.iters + 1):
                ts.sweep(cur)
                if t > burn and (t - burn) % thin == 0:
                    vals = []
                    for n, j in zip(names, pos):
                        vals.append(float(cur[j]) if j is not None else float(np.ravel(base[n])[0]))
                    rows.append(vals + [float(ts.table[tuple(cur)]), chain, t])
            continue
        st = dict(state) if state is not None else bm.initial_state(rng)
        sampler = _Sampler(bm, schedule, rng)
        for t in range(1, cfg.iters + 1):
            sampler.sweep(st, adapt=t <= burn)
            if t > burn and (t - burn) % thin == 0:
                rec = canonicalize_labels(bm, st)[0] if label is not None else st
                vals = np.concatenate([np.ravel(rec[n]) for n in names]) if names else np.zeros(0)
                rows.append(list(vals) + [log_joint(bm, rec), chain, t])
    arr = np.array(rows, dtype=float).reshape(-1, len(cols))
    meta = {
        "seed": cfg.seed,
        "iters": cfg.iters,
        "burnin": burn,
        "thin": thin,
        "chains": cfg.chains,
        "schedule": [(u.target, u.method) for u in schedule.updates],
    }
    return Trace(cols, arr, meta)
