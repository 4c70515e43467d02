"""Token-level machine unlearning on a tiny numpy transformer."""

from .attribution import importance_profiles, token_weights
from .datagen import Dataset, QASample, generate, load_dataset, save_dataset
from .experiments import ExperimentSpec, ablation_sweep, run_experiment
from .lm import ModelConfig, ModelState, TokenSequence, Vocabulary, backward, forward
from .metrics import evaluate
from .objectives import ObjectiveConfig, kl_retention_loss, sequence_unlearn_loss, unified_unlearn_loss
from .trainer import FinetuneConfig, TrainConfig, finetune_target, unlearn

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "ExperimentSpec",
    "FinetuneConfig",
    "ModelConfig",
    "ModelState",
    "ObjectiveConfig",
    "QASample",
    "TokenSequence",
    "TrainConfig",
    "Vocabulary",
    "ablation_sweep",
    "backward",
    "evaluate",
    "finetune_target",
    "forward",
    "generate",
    "importance_profiles",
    "kl_retention_loss",
    "load_dataset",
    "run_experiment",
    "save_dataset",
    "sequence_unlearn_loss",
    "token_weights",
    "unified_unlearn_loss",
    "unlearn",
]
