"""scikit-learn style wrappers around the functional modules.

Each estimator takes a model (source text, a path to a ``.gm`` file or a
:class:`~plategm.model.Model`) as a constructor parameter and learns from
tabular data in ``fit``.  Data may be a :class:`~plategm.io.data.DataTable`,
a pandas-like frame, a mapping of column name to values, or a 2-D array
together with ``columns``.
"""

from __future__ import annotations

import warnings
from pathlib import Path
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from plategm.decompose import classify_schema, factored_log_evidence
from plategm.em import EmConfig, e_step, em_run
from plategm.io.data import DataError, DataTable, read_csv
from plategm.model import BoundModel, Model, bind_data, load_model
from plategm.sampler.gibbs import GibbsConfig, gibbs_run
from plategm.sampler.structure import (
    StructureConfig,
    enumerate_posterior,
    model_average_predict,
    predictive_logpdf,
    structure_mcmc,
)

__all__ = [
    "check_data",
    "check_model",
    "ConjugateModel",
    "GibbsSampler",
    "EMEstimator",
    "StructureSearch",
]


def check_model(model) -> Model:
    """Accept a :class:`Model`, model source text or a path to a model file."""
    if isinstance(model, Model):
        return model
    if isinstance(model, Path) or (isinstance(model, str) and "\n" not in model and model.endswith(".gm")):
        return load_model(Path(model).read_text())
    if isinstance(model, str):
        return load_model(model)
    raise TypeError(f"expected a Model, model text or a path, got {type(model).__name__}")


def check_data(X, columns=None, missing: str = "?") -> DataTable:
    """Convert ``X`` to a :class:`DataTable`.

    ``None`` and NaN cells (and ``missing`` strings) are marked missing.
    """
    if isinstance(X, DataTable):
        return X
    if isinstance(X, (str, Path)):
        return read_csv(X, missing=missing)
    if hasattr(X, "columns") and hasattr(X, "to_numpy"):
        X = {str(c): X[c].to_numpy() for c in X.columns}
    if isinstance(X, dict):
        data = {}
        for k, v in X.items():
            data[str(k)] = [None if (isinstance(x, str) and x == missing) else x for x in np.ravel(np.asarray(v, dtype=object))]
        return DataTable.from_columns(data)
    arr = np.asarray(X, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise DataError(f"expected 2-D data, got shape {arr.shape}")
    if columns is None or len(columns) != arr.shape[1]:
        raise DataError("array data needs one column name per column")
    mask = np.isnan(arr)
    return DataTable(tuple(str(c) for c in columns), arr, mask)


class _ModelEstimator(BaseEstimator):
    def _bind(self, X, columns=None) -> BoundModel:
        self.model_ = check_model(self.model)
        table = check_data(X, columns)
        self.n_cases_ = table.n_rows
        return bind_data(self.model_, table)


class ConjugateModel(_ModelEstimator):
    """Exact posterior and evidence for conjugate, fully observed models.

    Attributes:
        log_evidence_: log marginal likelihood of the training data.
        factors_: per-factor log evidence.
        schema_: schema label of the bound model.
    """

    def __init__(self, model=None):
        self.model = model

    def fit(self, X, y=None, columns=None):
        bm = self._bind(X, columns)
        self.schema_ = classify_schema(bm).label
        self.factors_, self.log_evidence_ = factored_log_evidence(bm)
        self.bound_ = bm
        return self

    def score(self, X, y=None, columns=None) -> float:
        """Log predictive density of new cases given the training data."""
        check_is_fitted(self, "bound_")
        return predictive_logpdf(self.bound_, check_data(X, columns))


class GibbsSampler(_ModelEstimator):
    """Posterior draws by Gibbs sampling.

    Attributes:
        trace_: the recorded :class:`~plategm.sampler.gibbs.Trace`.
        posterior_mean_: mean of every recorded column.
    """

    def __init__(self, model=None, iters=1000, burnin=None, thin=1, chains=1, seed=0):
        self.model = model
        self.iters = iters
        self.burnin = burnin
        self.thin = thin
        self.chains = chains
        self.seed = seed

    def fit(self, X, y=None, columns=None):
        bm = self._bind(X, columns)
        cfg = GibbsConfig(self.iters, self.burnin, self.thin, self.chains, self.seed)
        self.trace_ = gibbs_run(bm, cfg)
        skip = {"chain", "iteration", "logjoint"}
        self.posterior_mean_ = {
            c: float(self.trace_.column(c).mean()) for c in self.trace_.columns if c not in skip
        }
        return self


class EMEstimator(_ModelEstimator):
    """Posterior mode (or mean-update) point estimate by EM.

    Attributes:
        params_: parameter values at the best restart.
        log_posterior_trace_: log posterior after every M-step.
        converged_: whether the tolerance was reached.
    """

    def __init__(self, model=None, tol=1e-8, max_iter=500, restarts=5, summary="mode", seed=0):
        self.model = model
        self.tol = tol
        self.max_iter = max_iter
        self.restarts = restarts
        self.summary = summary
        self.seed = seed

    def fit(self, X, y=None, columns=None):
        bm = self._bind(X, columns)
        cfg = EmConfig(self.tol, self.max_iter, self.restarts, self.summary, self.seed)
        with warnings.catch_warnings(record=True):
            warnings.simplefilter("always", RuntimeWarning)
            self.result_ = em_run(bm, cfg)
        self.params_ = self.result_.params
        self.log_posterior_trace_ = self.result_.trace
        self.converged_ = self.result_.converged
        self.n_iter_ = self.result_.n_iter
        return self

    def predict_proba(self, X, columns=None) -> np.ndarray:
        """Posterior probabilities of the joint per-case latent configuration,
        shape ``(n_cases, n_configurations)``."""
        check_is_fitted(self, "params_")
        bm = bind_data(self.model_, check_data(X, columns))
        state = bm.initial_state(np.random.default_rng(0))
        state.update(self.params_)
        ew = e_step(bm, state)
        if not ew.case_w or not ew.case_w[0].size:
            return np.ones((bm.data.n_rows, 1))
        return sum(g * c for g, c in zip(ew.global_w, ew.case_w)).T

    def predict(self, X, columns=None) -> np.ndarray:
        """Most probable per-case latent configuration."""
        return np.argmax(self.predict_proba(X, columns), axis=1)


class StructureSearch(_ModelEstimator):
    """Posterior over the members of an optional-arc family.

    Attributes:
        trace_: structure trace (``model-id`` codes optional arcs as bits).
        frequencies_: visit frequency of each member.
        posterior_: exact posterior by enumeration, when ``enumerate`` is set.
    """

    def __init__(self, model=None, iters=10_000, burnin=None, thin=1, chains=1, seed=0, arc_prior=0.5, enumerate=False):
        self.model = model
        self.iters = iters
        self.burnin = burnin
        self.thin = thin
        self.chains = chains
        self.seed = seed
        self.arc_prior = arc_prior
        self.enumerate = enumerate

    def fit(self, X, y=None, columns=None):
        bm = self._bind(X, columns)
        cfg = StructureConfig(self.iters, self.burnin, self.thin, self.chains, self.seed, self.arc_prior)
        self.trace_ = structure_mcmc(bm, cfg)
        ids, counts = np.unique(self.trace_.column("model-id").astype(int), return_counts=True)
        self.frequencies_ = {int(b): c / counts.sum() for b, c in zip(ids, counts)}
        self.posterior_: Optional[dict] = enumerate_posterior(bm, self.arc_prior) if self.enumerate else None
        self.bound_ = bm
        return self

    def score(self, X, y=None, columns=None) -> float:
        """Model-averaged log predictive density of new cases."""
        check_is_fitted(self, "bound_")
        w = self.posterior_ if self.posterior_ is not None else self.frequencies_
        return model_average_predict(self.bound_, check_data(X, columns), weights=w)["log_density"]
