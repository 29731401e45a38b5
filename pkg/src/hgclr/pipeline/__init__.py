"""Corpus handling, the assembled model, training, evaluation and persistence."""

from .data import (
                   CorpusError,
                   Document,
                   Vocabulary,
                   build_vocab,
                   encode_corpus,
                   generate_synthetic_corpus,
                   iter_corpus,
                   load_corpus,
                   write_corpus,
)
from .model import HGCLR, ModelConfig
from .training import (
                   CheckpointError,
                   Metrics,
                   TrainConfig,
                   Trainer,
                   TrainingDiverged,
                   evaluate_f1,
                   export_label_weights,
                   f1_scores,
                   load_checkpoint,
                   save_checkpoint,
                   train,
)

__all__ = [
    "CorpusError", "Document", "Vocabulary", "build_vocab", "encode_corpus", "generate_synthetic_corpus",
    "iter_corpus", "load_corpus", "write_corpus", "HGCLR", "ModelConfig", "CheckpointError", "Metrics",
    "Trainer", "TrainConfig", "TrainingDiverged", "evaluate_f1", "export_label_weights", "f1_scores",
    "load_checkpoint", "save_checkpoint", "train",
]
