"""Desk-scale workbench for cross-modal transformer distillation.

Submodules: ``autograd`` (tensors + reverse-mode differentiation),
``model`` (the traced cross-modal synchronizer), ``losses`` (the main
distillation objective and five baselines), ``data`` (synthetic paired
corpus), ``trainer`` (schedules, optimization, checkpoints),
``evaluate`` (retrieval protocol and ablation harnesses), ``cli``.
"""

from .autograd import Tensor, finite_diff_check, no_grad
from .data import AVPair, Corpus, CorpusConfig, generate_corpus, load_corpus, save_corpus
from .errors import (
    ConfigError, DataFormatError, DomainError, NumericalAbort, ShapeError,
    SyncDistillError, UsageError,
)
from .losses import DistillConfig, LayerSpec, LossBreakdown
from .model import AttentionTrace, ForwardOutput, ModelConfig, SyncModel, init_model, model_forward
from .trainer import TrainConfig, distill_student, load_checkpoint, save_checkpoint, train_teacher

__all__ = [
    "AVPair", "AttentionTrace", "ConfigError", "Corpus", "CorpusConfig",
    "DataFormatError", "DistillConfig", "DomainError", "ForwardOutput",
    "LayerSpec", "LossBreakdown", "ModelConfig", "NumericalAbort", "ShapeError",
    "SyncDistillError", "SyncModel", "Tensor", "TrainConfig", "UsageError",
    "distill_student", "finite_diff_check", "generate_corpus", "init_model",
    "load_checkpoint", "load_corpus", "model_forward", "no_grad",
    "save_checkpoint", "save_corpus", "train_teacher",
]

__version__ = "0.1.0"
