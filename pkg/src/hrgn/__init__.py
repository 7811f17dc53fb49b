"""Stream temperature prediction on river-reservoir networks with state adjustment."""
from . import numcore  # noqa: F401  (enables float64)
from .assimilation import EnkfConfig, UpdatePolicy, rollout, rollout_with_assimilation
from .cell import Model, ModelConfig
from .dataio import DatasetBundle, bundle_from_synth, load_bundle, write_synth
from .graph import Edge, HeteroGraph, build_adjacency
from .synth import SynthConfig, generate
from .training import TrainConfig, finetune, predict, pretrain, train

__all__ = [
    "DatasetBundle", "Edge", "EnkfConfig", "HeteroGraph", "Model", "ModelConfig", "SynthConfig", "TrainConfig",
    "UpdatePolicy", "build_adjacency", "bundle_from_synth", "finetune", "generate", "load_bundle", "predict",
    "pretrain", "rollout", "rollout_with_assimilation", "train", "write_synth",
]
