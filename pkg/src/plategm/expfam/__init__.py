"""Exponential-family engine: node families, statistics, conjugate updates."""

from plategm.expfam.conjugate import (
    BetaPrior,
    ConjugatePrior,
    DirichletPrior,
    GammaPrior,
    GaussianPrior,
    NormalGammaPrior,
    NormalWishartPrior,
    NumericError,
    SummaryError,
    WishartPrior,
    log_evidence,
    posterior,
    posterior_summary,
    sample_param,
)
from plategm.expfam.descriptor import FamilyDescriptor, descriptor, log_density
from plategm.expfam.families import Domain, Family, SupportError, make_family
from plategm.expfam.stats import StatsError, SufficientStats, accumulate

__all__ = [
    "BetaPrior",
    "ConjugatePrior",
    "DirichletPrior",
    "Domain",
    "Family",
    "FamilyDescriptor",
    "GammaPrior",
    "GaussianPrior",
    "NormalGammaPrior",
    "NormalWishartPrior",
    "NumericError",
    "StatsError",
    "SufficientStats",
    "SummaryError",
    "SupportError",
    "WishartPrior",
    "accumulate",
    "descriptor",
    "log_density",
    "log_evidence",
    "make_family",
    "posterior",
    "posterior_summary",
    "sample_param",
]
