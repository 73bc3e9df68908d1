"""Hyperparameter ensembles of neural networks.

Hyper-deep ensembles combine random search, greedy with-replacement
selection and retraining under several initializations. Hyper-batch
ensembles train K members in one network whose layers are modulated by
per-member hyperparameter distributions that are tuned during training.
"""

from . import bestresponse, datastore, diffcore, hyperdist, kernels, layers, metrics, objectives
from . import selection, trainer
from .datastore import ExperimentConfig, ModelSpec, TrainPlan
from .hyperdist import HyperSchema, MemberDistribution
from .network import Network
from .selection import EnsembleSelection, ModelRecord, hyper_deep_ens, hyper_ens
from .trainer import fit_hyper_batch, train_fixed

__version__ = "0.1.0"

__all__ = [
    "EnsembleSelection",
    "ExperimentConfig",
    "HyperSchema",
    "MemberDistribution",
    "ModelRecord",
    "ModelSpec",
    "Network",
    "TrainPlan",
    "bestresponse",
    "datastore",
    "diffcore",
    "fit_hyper_batch",
    "hyper_deep_ens",
    "hyper_ens",
    "hyperdist",
    "kernels",
    "layers",
    "metrics",
    "objectives",
    "selection",
    "train_fixed",
    "trainer",
]
