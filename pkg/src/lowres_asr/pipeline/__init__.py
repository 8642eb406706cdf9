from .labels import pseudo_label, read_labels, write_labels
from .metrics import EvalConfig, edit_distance, error_rate, evaluate, word_error_rate
from .regimes import (
    DistillConfig,
    ExperimentRecord,
    adapt,
    self_train,
    train_distill,
    train_supervised,
)

__all__ = [
    "DistillConfig",
    "EvalConfig",
    "ExperimentRecord",
    "adapt",
    "edit_distance",
    "error_rate",
    "evaluate",
    "pseudo_label",
    "read_labels",
    "self_train",
    "train_distill",
    "train_supervised",
    "word_error_rate",
    "write_labels",
]
