"""Thermodynamic regime-mixture spatial regression.

A library plus batch CLI for fitting an entropy-adjusted mixture of
burden/capacity potentials over a spatial kNN graph, evaluating it with
spatially blocked cross-validation, and extracting gradient-based
burden/capacity diagnostics. Synthetic scenarios with analytic ground
truth provide the verification harness.
"""

__version__ = "0.1.0"

from .data import (GroundTruthFields, RoleSchema, SpatialDataset,
                   destandardize, load_dataset, standardize)
from .graph import (BlockPartition, SpatialGraph, block_partition,
                    build_knn_graph, diffuse, morans_i, training_subgraph)
from .model import (ForwardOutputs, ModelConfig, ZegnnParams, backward,
                    forward, init_params, jvp, load_checkpoint,
                    positive_transform, save_checkpoint)
from .synthetic import ScenarioSpec, generate_scenario, scenario_schema
from .training import TrainConfig, fit, predict

__all__ = [
    "__version__",
    "BlockPartition", "ForwardOutputs", "GroundTruthFields", "ModelConfig",
    "RoleSchema", "ScenarioSpec", "SpatialDataset", "SpatialGraph",
    "TrainConfig", "ZegnnParams",
    "backward", "block_partition", "build_knn_graph", "destandardize",
    "diffuse", "fit", "forward", "generate_scenario", "init_params", "jvp",
    "load_checkpoint", "load_dataset", "morans_i", "positive_transform",
    "predict", "save_checkpoint", "scenario_schema", "standardize",
    "training_subgraph",
]
