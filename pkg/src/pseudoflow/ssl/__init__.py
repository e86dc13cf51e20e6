"""Iterative pseudo-labeling loop: labels, student training, CV, finetune."""

from .ssl import (
    CvReport,
    SslConfig,
    finetune,
    fold_partition,
    generate_pseudo_labels,
    kfold_cv,
    labels_hash,
    run,
    select_finetune_steps,
    train_unlabeled,
)

__all__ = [
    "CvReport",
    "SslConfig",
    "finetune",
    "fold_partition",
    "generate_pseudo_labels",
    "kfold_cv",
    "labels_hash",
    "run",
    "select_finetune_steps",
    "train_unlabeled",
]
