"""Expectation-maximisation for models whose parameters form conjugate groups
once the discrete unknowns are filled in.

The E-step enumerates discrete unknowns (global values times per-case
values) and weights every completed state by its posterior probability.
Expected sufficient statistics of each conjugate group are the weighted
sums of the completed-data statistics.  The M-step sets every group to the
mode (or mean) of its conjugate posterior given those statistics, one group
after another so that coupled groups see each other's updates.

Each restart starts from random responsibilities rather than random
parameters, so the first M-step stays inside every family's support.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from plategm.autodiff import EnumerationError, log_marginal, responsibilities
from plategm.conjugacy import ConjugateGroup, find_groups
from plategm.decompose import SchemaError
from plategm.expfam.conjugate import SummaryError, posterior_summary
from plategm.sampler.gibbs import canonicalize_labels, label_structure

__all__ = [
    "EmConfig",
    "EmResult",
    "EmError",
    "ExpectedWeights",
    "em_groups",
    "e_step",
    "m_step",
    "em_run",
    "log_posterior",
]


class EmError(ArithmeticError):
    """The log posterior became non-finite."""


@dataclass(frozen=True)
class EmConfig:
    """EM settings.

    ``tol`` bounds the relative change of the log posterior between
    iterations; ``summary`` picks the M-step update (``mode`` maximises,
    ``mean`` gives the deterministic mean-update sequence).
    """

    tol: float = 1e-8
    max_iter: int = 500
    restarts: int = 5
    summary: str = "mode"
    seed: int = 0
    canonicalize: bool = True

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.summary not in ("mode", "mean"):
            raise ValueError("summary must be 'mode' or 'mean'")


@dataclass
class EmResult:
    """Outcome of the best restart.

    ``trace[t]`` is the log posterior after M-step ``t``.  ``n_iter`` counts
    the iterations that produced the final value: a converged run stops one
    iteration later, when the change first drops below the tolerance.
    """

    params: dict
    trace: list
    converged: bool
    n_iter: int
    restart: int
    restart_log_posteriors: list = field(default_factory=list)
    fallbacks: list = field(default_factory=list)

    @property
    def log_posterior(self) -> float:
        return float(self.trace[-1])

    def to_json(self) -> dict:
        return {
            "parameters": {k: np.asarray(v).tolist() for k, v in self.params.items()},
            "log_posterior_trace": [float(v) for v in self.trace],
            "log_posterior": self.log_posterior,
            "iterations": self.n_iter,
            "converged": self.converged,
            "restart": self.restart,
            "restart_log_posteriors": [float(v) for v in self.restart_log_posteriors],
            "mean_fallbacks": sorted(set(self.fallbacks)),
        }


@dataclass
class ExpectedWeights:
    """Posterior weights over completed states.

    ``states[g][c]`` is the state with global configuration ``g`` and case
    configuration ``c``; ``global_w`` has shape ``(G,)`` and ``case_w[g]``
    shape ``(C, N)``.
    """

    states: list
    global_w: np.ndarray
    case_w: list
    plate: Optional[str]


def em_groups(bm) -> list[ConjugateGroup]:
    """Conjugate groups covering every parameter, or :class:`SchemaError`."""
    groups, reasons = find_groups(bm)
    covered = {m for g in groups for m in g.members}
    left = [p for p in bm.parameters if p not in covered]
    if left:
        why = "; ".join(f"{p}: {reasons.get(p, 'not conjugate')}" for p in left)
        raise SchemaError(f"EM needs conjugate updates for every parameter ({why})")
    cont = [n for n in bm.case_unknowns if not bm.node(n).domain.is_discrete]
    if cont:
        raise SchemaError(f"continuous unknown values {cont} are not supported by EM")
    return groups


def log_posterior(bm, state: dict) -> float:
    """``log p(parameters, observed)`` with discrete unknowns summed out."""
    return log_marginal(bm, state)


def _case_plate(bm, en) -> Optional[str]:
    plates = {bm.node(n).plates[0] for n in en.case_nodes}
    return next(iter(plates), None)


def e_step(bm, state: dict) -> ExpectedWeights:
    """Posterior over discrete unknowns at the parameters in ``state``."""
    gw, cw, en = responsibilities(bm, state)
    return ExpectedWeights(en.states, gw, cw, _case_plate(bm, en))


def _random_weights(bm, state: dict, rng: np.random.Generator) -> ExpectedWeights:
    """Random responsibilities over the same completed states as an E-step."""
    ew = e_step(bm, state)
    G = len(ew.states)
    gw = rng.dirichlet(np.ones(G)) if G > 1 else np.ones(1)
    cw = []
    for g in range(G):
        c = ew.case_w[g]
        if c.size and c.shape[0] > 1:
            cw.append(rng.dirichlet(np.ones(c.shape[0]), size=c.shape[1]).T)
        else:
            cw.append(np.ones_like(c))
    return ExpectedWeights(ew.states, gw, cw, ew.plate)


def _expected_stats(bm, group: ConjugateGroup, ew: ExpectedWeights, values: dict) -> list:
    total = group.empty_stats(bm)
    for g, per in enumerate(ew.states):
        if ew.global_w[g] == 0:
            continue
        for c, st in enumerate(per):
            st = {**st, **values}
            r = ew.case_w[g][c] if ew.case_w[g].size else None

            def weights(site, _g=g, _c=c, _r=r):
                plates = bm.node(site).plates
                shape = bm.plate_shape(site)
                if ew.plate is None or ew.plate not in plates:
                    w = ew.global_w[_g] if _c == 0 else 0.0
                    return np.full(shape, w)
                sh = [1] * len(plates)
                sh[plates.index(ew.plate)] = -1
                return np.broadcast_to(ew.global_w[_g] * _r.reshape(sh), shape)

            for i, s in enumerate(group.stats(bm, st, weights)):
                total[i] = total[i].merge(s)
    return total


def _inside(bm, group: ConjugateGroup, value: dict) -> bool:
    for role, name in group.roles.items():
        v = np.asarray(value[role], dtype=float).reshape(bm.model.shapes[name])
        if not np.all(bm.family(name).in_support(v, 0)):
            return False
    return True


def m_step(bm, groups, ew: ExpectedWeights, state: dict, summary: str = "mode", fallbacks=None) -> dict:
    """Update every group to its conjugate posterior summary.

    Groups are updated in turn, each seeing the values already written by
    earlier groups.  An undefined mode falls back to the mean with a warning.
    Returns the new parameter values.
    """
    values = {p: np.asarray(state[p], dtype=float) for p in bm.parameters}
    for group in groups:
        stats = _expected_stats(bm, group, ew, values)
        new = []
        for prior, s in zip(group.priors(bm), stats):
            post = prior.posterior(s)
            try:
                v = posterior_summary(post, summary)
                if not _inside(bm, group, v):
                    raise SummaryError("mode lies on the boundary of the support")
                new.append(v)
            except SummaryError as exc:
                warnings.warn(f"{group.name}: {exc}; using the posterior mean", RuntimeWarning, stacklevel=2)
                if fallbacks is not None:
                    fallbacks.append(group.name)
                new.append(posterior_summary(post, "mean"))
        tmp = dict(values)
        group.assign(bm, tmp, new)
        values.update({m: tmp[m] for m in group.members})
    return values


def _single_run(bm, groups, cfg: EmConfig, rng, fallbacks) -> tuple:
    state = bm.initial_state(rng)
    ew = _random_weights(bm, state, rng)
    trace = []
    converged = False
    for it in range(cfg.max_iter):
        if it > 0:
            ew = e_step(bm, state)
        state = {**state, **m_step(bm, groups, ew, state, cfg.summary, fallbacks)}
        lp = log_posterior(bm, state)
        if not np.isfinite(lp):
            raise EmError(f"non-finite log posterior at iteration {it + 1}")
        trace.append(lp)
        if it > 0 and abs(lp - trace[-2]) <= cfg.tol * max(abs(trace[-2]), 1e-300):
            converged = True
            break
    n_iter = len(trace) - 1 if converged else len(trace)
    return state, trace, converged, n_iter


def em_run(bm, cfg: EmConfig = EmConfig()) -> EmResult:
    """Run EM from ``cfg.restarts`` random starts and keep the best.

    Restart ``r`` draws from ``np.random.default_rng([seed, r])``.  For
    mixtures the winning labels are reordered so the key parameter increases.
    """
    groups = em_groups(bm)
    try:
        e_step(bm, bm.initial_state(np.random.default_rng(0)))
    except EnumerationError as exc:
        raise SchemaError(str(exc)) from exc
    best = None
    finals = []
    fallbacks: list = []
    for r in range(cfg.restarts):
        rng = np.random.default_rng([cfg.seed, r])
        out = _single_run(bm, groups, cfg, rng, fallbacks)
        finals.append(out[1][-1])
        if best is None or out[1][-1] > best[1][1][-1]:
            best = (r, out)
    r, (state, trace, converged, n_iter) = best
    if cfg.canonicalize and label_structure(bm) is not None:
        state = canonicalize_labels(bm, state)[0]
    params = {p: np.asarray(state[p]) for p in bm.parameters}
    return EmResult(params, trace, converged, n_iter, r, finals, fallbacks)
