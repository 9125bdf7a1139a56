"""Gibbs sampling, symmetry breaking and structure search."""

from plategm.sampler.gibbs import (
    GibbsConfig,
    GibbsError,
    GibbsSchedule,
    Trace,
    Update,
    build_schedule,
    canonicalize_labels,
    effective_sample_size,
    full_conditional,
    gibbs_run,
    label_structure,
)
from plategm.sampler.structure import (
    StructureConfig,
    complete_data,
    enumerate_posterior,
    model_average_predict,
    model_prior,
    predictive_logpdf,
    structure_mcmc,
)

__all__ = [
    "GibbsConfig",
    "GibbsError",
    "GibbsSchedule",
    "Trace",
    "Update",
    "build_schedule",
    "canonicalize_labels",
    "effective_sample_size",
    "full_conditional",
    "gibbs_run",
    "label_structure",
    "StructureConfig",
    "complete_data",
    "enumerate_posterior",
    "model_average_predict",
    "model_prior",
    "predictive_logpdf",
    "structure_mcmc",
]
