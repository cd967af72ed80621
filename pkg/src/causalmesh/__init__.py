"""Deep structural causal shape modelling for triangulated surfaces."""

from causalmesh.cvae import MeshCvae, MeshCvaeConfig, elbo_terms
from causalmesh.scm import (
    CausalGraph,
    CovariateRecord,
    Intervention,
    StructuralCausalModel,
    make_model,
)
from causalmesh.training import TrainingConfig, load_checkpoint, train_model

__version__ = "0.1.0"

__all__ = [
    "CausalGraph",
    "CovariateRecord",
    "Intervention",
    "MeshCvae",
    "MeshCvaeConfig",
    "StructuralCausalModel",
    "TrainingConfig",
    "elbo_terms",
    "load_checkpoint",
    "make_model",
    "train_model",
    "__version__",
]
