"""Transformer-based spatiotemporal kriging on sensor graphs, built on a small numpy autodiff core."""

__version__ = "0.1.0"

from .data import DatasetBundle, generate_synthetic, load_bundle, load_distances_csv, load_speeds_csv
from .errors import CheckpointError, DataError, KriformerError, NumericError, ParameterError, ShapeError, \
    TrainingError
from .evaluation import EvalReport, evaluate_sm, knn_baseline, mae, mape, mean_baseline, rmse
from .graph import SensorGraph, eigendecompose, graph_features, normalized_laplacian
from .model import ABLATIONS, Hyper, KriformerModel, apply_ablation, forward, init_model, load_checkpoint, \
    save_checkpoint
from .training import MaskSpec, NormStats, TrainConfig, fit, krige

__all__ = [
    "ABLATIONS", "CheckpointError", "DataError", "DatasetBundle", "EvalReport", "Hyper", "KriformerError",
    "KriformerModel", "MaskSpec", "NormStats", "NumericError", "ParameterError", "SensorGraph", "ShapeError",
    "TrainConfig", "TrainingError", "apply_ablation", "eigendecompose", "evaluate_sm", "fit", "forward",
    "generate_synthetic", "graph_features", "init_model", "knn_baseline", "krige", "load_bundle",
    "load_checkpoint", "load_distances_csv", "load_speeds_csv", "mae", "mape", "mean_baseline",
    "normalized_laplacian", "rmse", "save_checkpoint",
]
