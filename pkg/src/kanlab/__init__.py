"""Spline-based Kolmogorov-Arnold network classifiers on a small numpy autodiff engine."""

__version__ = "0.1.0"

from .tensor import ShapeError, Tensor, no_grad, tensor
from .spline import SplineGrid, bspline_basis, least_squares_fit
from .layers import KANLinear, SBRBFLayer, WaveletLayer, morlet, taylor_expand
from .models import BackboneConfig, Model, ModelSpec, SpecError, build, parameter_count
from .data import Dataset, ReductionSpec, reduce_training_set, stratified_split, synth_generate
from .train import TrainConfig, TrainReport, evaluate, train
from .checkpoint import CheckpointFormatError, load_checkpoint, save_checkpoint
from .metrics import ConfusionMatrix, metrics_report, roc_auc
from .gradcam import Heatmap, gradcam, overlay_export

__all__ = [
    "ShapeError", "Tensor", "no_grad", "tensor",
    "SplineGrid", "bspline_basis", "least_squares_fit",
    "KANLinear", "SBRBFLayer", "WaveletLayer", "morlet", "taylor_expand",
    "BackboneConfig", "Model", "ModelSpec", "SpecError", "build", "parameter_count",
    "Dataset", "ReductionSpec", "reduce_training_set", "stratified_split", "synth_generate",
    "TrainConfig", "TrainReport", "evaluate", "train",
    "CheckpointFormatError", "load_checkpoint", "save_checkpoint",
    "ConfusionMatrix", "metrics_report", "roc_auc",
    "Heatmap", "gradcam", "overlay_export",
]
