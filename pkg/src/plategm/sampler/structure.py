"""Metropolis search over the networks of an optional-arc family, and
prediction averaged over network structures.

A move toggles one uniformly chosen optional arc.  The toggle is its own
inverse, so the proposal is symmetric and the acceptance probability is
``min(1, BF(G', G) p(G') / p(G))``.  Moves that would create a directed
cycle are rejected and counted.  The Bayes factor comes from the single
factor the toggled arc touches; scores are cached per factor.

With missing cells, each iteration resamples the unknown cells (and any
latent values) by one Gibbs sweep of the current network and scores the
proposal on the completed data.  ``resample`` puts the sweep before
(default) or after the structure move.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from plategm.decompose import EvidenceScorer, factored_log_evidence
from plategm.io.data import DataTable
from plategm.model import BoundModel, bind_data
from plategm.sampler.gibbs import Trace, _Sampler, build_schedule, chain_rng

__all__ = [
    "StructureConfig",
    "structure_mcmc",
    "enumerate_posterior",
    "model_prior",
    "predictive_logpdf",
    "model_average_predict",
    "complete_data",
]


@dataclass(frozen=True)
class StructureConfig:
    """``arc_prior`` is the prior probability that each optional arc is present."""

    iters: int = 10_000
    burnin: Optional[int] = None
    thin: int = 1
    chains: int = 1
    seed: int = 0
    arc_prior: float = 0.5
    start: Optional[int] = None
    resample: str = "before"

    def __post_init__(self):
        if self.resample not in ("before", "after"):
            raise ValueError("resample must be 'before' or 'after'")
        if not 0 < self.arc_prior < 1:
            raise ValueError("arc_prior must lie strictly between 0 and 1")
        if self.iters < 0 or self.thin < 1 or self.chains < 1:
            raise ValueError("iters must be >= 0, thin and chains >= 1")
        if self.burnin is not None and not 0 <= self.burnin <= self.iters:
            raise ValueError("burnin must lie in 0..iters")

    @property
    def n_burnin(self) -> int:
        return self.iters // 10 if self.burnin is None else self.burnin


def model_prior(bits: int, n_arcs: int, arc_prior: float) -> float:
    """Log prior of a family member: independent arcs."""
    k = bin(bits).count("1")
    return k * np.log(arc_prior) + (n_arcs - k) * np.log1p(-arc_prior)


def complete_data(bm, state: dict) -> BoundModel:
    """The bound model with missing cells filled from ``state``."""
    observed = {n: np.array(state[n], dtype=float) for n in bm.observed}
    missing = {n: np.zeros_like(m, dtype=bool) for n, m in bm.missing.items()}
    return replace(bm, observed=observed, missing=missing)


def enumerate_posterior(bm, arc_prior: float = 0.5) -> dict:
    """Exact posterior over every acyclic member of the family:
    ``{bits: probability}``."""
    scorer = EvidenceScorer(bm)
    n = len(scorer.arcs)
    logs = {}
    for bits in range(1 << n):
        if not scorer.acyclic(bits):
            continue
        logs[bits] = scorer.score(bits).total + model_prior(bits, n, arc_prior)
    z = logsumexp(list(logs.values()))
    return {b: float(np.exp(v - z)) for b, v in logs.items()}


def structure_mcmc(bm, cfg: StructureConfig = StructureConfig()) -> Trace:
    """Metropolis chain over family members.

    The trace has columns ``model-id`` (bit ``i`` set when optional arc ``i``
    is present), ``logjoint`` (log evidence plus log model prior), ``chain``
    and ``iteration``.  ``meta`` reports acceptance and cycle-rejection
    counts.
    """
    n_arcs = len(bm.graph.optional_order)
    burn, thin = cfg.n_burnin, cfg.thin
    has_missing = bool(set(bm.unknowns) - set(bm.parameters))
    rows = []
    accepted = rejected_cycle = proposed = 0
    scorer = None if has_missing else EvidenceScorer(bm)
    for chain in range(cfg.chains):
        rng = chain_rng(cfg.seed, chain)
        bits = cfg.start if cfg.start is not None else (bm.model.full_bits if n_arcs else 0)
        state = bm.initial_state(rng) if has_missing else None
        if has_missing:
            scorer = EvidenceScorer(complete_data(bm, state))
        cur = scorer.score(bits)

        def resample(bits):
            member = bm.instantiate(bits)
            _Sampler(member, build_schedule(member), rng).sweep(state)
            sc = EvidenceScorer(complete_data(bm, state))
            return sc, sc.score(bits)

        for t in range(1, cfg.iters + 1):
            if has_missing and cfg.resample == "before":
                scorer, cur = resample(bits)
            if n_arcs:
                i = int(rng.integers(n_arcs))
                proposed += 1
                nb = bits ^ (1 << i)
                if not scorer.acyclic(nb):
                    rejected_cycle += 1
                    rng.random()
                else:
                    new, _ = scorer.toggle(cur, i)
                    log_a = (new.total - cur.total) + (
                        model_prior(nb, n_arcs, cfg.arc_prior) - model_prior(bits, n_arcs, cfg.arc_prior)
                    )
                    if np.log(rng.random()) < log_a:
                        bits, cur = nb, new
                        accepted += 1
            if has_missing and cfg.resample == "after":
                scorer, cur = resample(bits)
            if t > burn and (t - burn) % thin == 0:
                lj = cur.total + model_prior(bits, n_arcs, cfg.arc_prior)
                rows.append((bits, lj, chain, t))
    arr = np.array(rows, dtype=float).reshape(-1, 4)
    meta = {
        "seed": cfg.seed,
        "iters": cfg.iters,
        "burnin": burn,
        "thin": thin,
        "chains": cfg.chains,
        "arcs": [f"{u}->{v}" for u, v in bm.graph.optional_order],
        "proposed": proposed,
        "accepted": accepted,
        "rejected_cycle": rejected_cycle,
        "factor_evaluations": None if scorer is None else len(scorer.recomputed),
    }
    return Trace(["model-id", "logjoint", "chain", "iteration"], arr, meta)


def predictive_logpdf(bm, query: DataTable) -> float:
    """``log p(query | data)`` for a conjugate, fully observed model: the
    evidence of data plus query cases minus the evidence of the data."""
    data = bm.data
    if data is None:
        raise ValueError("the model has no data bound")
    missing = [c for c in data.columns if c not in query.columns]
    if missing:
        raise ValueError(f"query lacks columns {missing}")
    idx = [query.columns.index(c) for c in data.columns]
    both = DataTable(
        data.columns,
        np.vstack([data.values, query.values[:, idx]]),
        np.vstack([data.mask, query.mask[:, idx]]),
    )
    joint = bind_data(bm.model, both)
    return factored_log_evidence(joint)[1] - factored_log_evidence(bm)[1]


def model_average_predict(
    bm,
    query: DataTable,
    weights: Optional[dict] = None,
    trace: Optional[Trace] = None,
    arc_prior: float = 0.5,
) -> dict:
    """Predictive density of ``query`` averaged over family members.

    Weights are the enumerated posterior (default), explicit ``{bits: w}``,
    or the model frequencies of a structure ``trace``.  Returns
    ``{"log_density": float, "per_model": {bits: log density}, "weights": ...}``.
    """
    if trace is not None:
        ids, counts = np.unique(trace.column("model-id").astype(int), return_counts=True)
        weights = {int(b): c / counts.sum() for b, c in zip(ids, counts)}
    elif weights is None:
        weights = enumerate_posterior(bm, arc_prior)
    weights = {b: w for b, w in weights.items() if w > 0}
    if not weights:
        raise ValueError("empty model set")
    per = {}
    for b in weights:
        per[b] = predictive_logpdf(bm.instantiate(b), query)
    bs = list(weights)
    ld = float(logsumexp([per[b] for b in bs], b=[weights[b] for b in bs]))
    return {"log_density": ld, "per_model": per, "weights": weights}
