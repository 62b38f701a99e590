"""CP-Net long-term forecasting on a small numpy autodiff engine."""

from .data import Dataset, SynthSpec, load_csv, prepare, split, synth_generate
from .engine import Graph, Tensor, backward, finite_diff_grad, tensor_from
from .model import (
    BranchConfig,
    CPNet,
    ModelConfig,
    apply_ablation,
    cpnet_forward,
    instance_denormalize,
    instance_normalize,
)
from .train import Metrics, RunReport, TrainConfig, evaluate, fit, train

__version__ = "0.1.0"

__all__ = [
    "BranchConfig", "CPNet", "Dataset", "Graph", "Metrics", "ModelConfig", "RunReport", "SynthSpec",
    "Tensor", "TrainConfig", "apply_ablation", "backward", "cpnet_forward", "evaluate", "finite_diff_grad",
    "fit", "instance_denormalize", "instance_normalize", "load_csv", "prepare", "split", "synth_generate",
    "tensor_from", "train",
]
