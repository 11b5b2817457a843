"""Desk-scale federated learning simulator with representation-regularized
local training (FedIntR), plus FedAvg / FedProx / MOON baselines."""

__version__ = "0.1.0"

from fedreg.data import Dataset, Partition, dirichlet_partition, synth_dataset
from fedreg.federation import FLConfig, run_training
from fedreg.metrics import evaluate, median_last_k
from fedreg.nn.model import (
    Conv,
    Dense,
    ModelSpec,
    ModelState,
    Output,
    default_cnn_spec,
    init_state,
)
from fedreg.reprreg import RegConfig

__all__ = [
    "Conv",
    "Dataset",
    "Dense",
    "FLConfig",
    "ModelSpec",
    "ModelState",
    "Output",
    "Partition",
    "RegConfig",
    "default_cnn_spec",
    "dirichlet_partition",
    "evaluate",
    "init_state",
    "median_last_k",
    "run_training",
    "synth_dataset",
]
