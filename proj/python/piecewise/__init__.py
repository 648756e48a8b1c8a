"""Python bindings for the piecewise C++ library."""

from ._core import (
    ContractViolation,
    Model,
    ParseError,
    TrainingAborted,
    __version__,
    batch_size_bound,
    cli,
    clustering_accuracy,
    confidence_loss,
    gen_two_circles,
    instance_transition,
    is_diagonal,
    label_transition,
    recurrent_class_count,
    self_consistent_batch_size,
    train,
)

__all__ = [
    "ContractViolation",
    "Model",
    "ParseError",
    "TrainingAborted",
    "__version__",
    "batch_size_bound",
    "cli",
    "clustering_accuracy",
    "confidence_loss",
    "gen_two_circles",
    "instance_transition",
    "is_diagonal",
    "label_transition",
    "recurrent_class_count",
    "self_consistent_batch_size",
    "train",
]
