"""Double negative control estimation of average treatment effects."""
from .data import CategoricalCoding, ColumnSchema, Dataset, ModelSpec, load_dataset, write_dataset
from .errors import NegCtrlError, NumericalError, ValidationError
from .estimators import EstimateReport, FitCache, estimate, fit_nuisance, reduction_check
from .identify import (DiscreteLaw, ObservedLaw, ate_by_identification, ate_by_reparameterization,
                       enumerate_coarsenings, gmm_combine, infer_latent_cardinality, observed_matrices)
from .inference import bootstrap_se, sandwich_variance, wald_interval, wald_test

__version__ = "0.1.0"

__all__ = [
    "CategoricalCoding", "ColumnSchema", "Dataset", "ModelSpec", "load_dataset", "write_dataset",
    "NegCtrlError", "NumericalError", "ValidationError",
    "EstimateReport", "FitCache", "estimate", "fit_nuisance", "reduction_check",
    "DiscreteLaw", "ObservedLaw", "ate_by_identification", "ate_by_reparameterization",
    "enumerate_coarsenings", "gmm_combine", "infer_latent_cardinality", "observed_matrices",
    "bootstrap_se", "sandwich_variance", "wald_interval", "wald_test",
]
