"""Semi-supervised dual-task segmentation of frame sequences with
skeleton-aware distance transforms and cross-frame topological consistency.
"""
from .data import FramePair, GeneratorConfig, SplitSpec, generate_synthetic_sequence, load_dataset, split_dataset
from .losses import LossWeights
from .metrics import MetricReport, evaluate
from .model import NetConfig, PredictionBundle, build_model
from .sdt import SdtField, TopoPointSet, compute_sdt
from .train import TrainConfig, run_training

__version__ = "0.1.0"

__all__ = [
    "FramePair",
    "GeneratorConfig",
    "LossWeights",
    "MetricReport",
    "NetConfig",
    "PredictionBundle",
    "SdtField",
    "SplitSpec",
    "TopoPointSet",
    "TrainConfig",
    "build_model",
    "compute_sdt",
    "evaluate",
    "generate_synthetic_sequence",
    "load_dataset",
    "run_training",
    "split_dataset",
]
