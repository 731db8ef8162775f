"""Data generation, nuisance fitting and AIPW estimation."""

from .dgp import DgpTruth, NearBoundaryConfig, gen_aipw_iid, gen_clustered
from .estimator import EstimatorPipeline, aipw, loo_perturbations
from .models import ClusteredDataset, Dataset

__all__ = [
    "ClusteredDataset",
    "Dataset",
    "DgpTruth",
    "EstimatorPipeline",
    "NearBoundaryConfig",
    "aipw",
    "gen_aipw_iid",
    "gen_clustered",
    "loo_perturbations",
]
