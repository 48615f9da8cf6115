"""Keep-and-replace composed image retrieval with target-guided distillation."""

from .config import ExperimentConfig, ModelConfig, TrainConfig, WorldSpec
from .data import Triplet, World, generate_world, sample_triplets
from .estimator import ComposedImageRetriever
from .evaluation import EvalReport, evaluate
from .experiments import run_ablation_matrix, run_experiment
from .model import ComposedRetrievalModel
from .training import load_checkpoint, run_training, save_checkpoint

__all__ = [
    "ComposedImageRetriever",
    "ComposedRetrievalModel",
    "EvalReport",
    "ExperimentConfig",
    "ModelConfig",
    "TrainConfig",
    "Triplet",
    "World",
    "WorldSpec",
    "evaluate",
    "generate_world",
    "load_checkpoint",
    "run_ablation_matrix",
    "run_experiment",
    "run_training",
    "sample_triplets",
    "save_checkpoint",
]

__version__ = "0.1.0"
