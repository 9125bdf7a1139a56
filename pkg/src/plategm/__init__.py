"""Bayesian learning with graphical models and plates.

The usual entry points are :func:`load_model` and :func:`bind_data`,
followed by :func:`factored_log_evidence` for conjugate models,
:func:`gibbs_run`, :func:`em_run` or :func:`structure_mcmc`.
"""

__version__ = "0.1.0"

from plategm.decompose import (
    EvidenceScorer,
    classify_schema,
    factored_log_evidence,
    finest_decomposition,
    log_bayes_factor,
)
from plategm.em import EmConfig, EmResult, em_run
from plategm.io.data import DataTable, read_csv
from plategm.model import BoundModel, Model, bind_data, load_model, simulate_data
from plategm.sampler import GibbsConfig, StructureConfig, gibbs_run, structure_mcmc

__all__ = [
    "__version__",
    "BoundModel",
    "DataTable",
    "EmConfig",
    "EmResult",
    "EvidenceScorer",
    "GibbsConfig",
    "Model",
    "StructureConfig",
    "bind_data",
    "classify_schema",
    "em_run",
    "factored_log_evidence",
    "finest_decomposition",
    "gibbs_run",
    "load_model",
    "log_bayes_factor",
    "read_csv",
    "simulate_data",
    "structure_mcmc",
]
